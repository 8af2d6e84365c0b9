//! Plain-text CSV formats: detections, embedding and metadata sidecars,
//! wheel keypoints and identity-labelled track files.
//!
//! All numeric text is period-decimal. Reals are written with six significant
//! digits, so a parse/serialize round trip is exact at that precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Identifies one detection: (camera, frame, index within the frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetKey {
    pub camera_id: u32,
    pub frame: i64,
    pub det_index: u32,
}

impl std::fmt::Display for DetKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(camera {}, frame {}, det {})",
            self.camera_id, self.frame, self.det_index
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub camera_id: u32,
    pub frame: i64,
    pub det_index: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn key(&self) -> DetKey {
        DetKey {
            camera_id: self.camera_id,
            frame: self.frame,
            det_index: self.det_index,
        }
    }
}

/// Appearance embeddings keyed by detection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<DetKey, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &DetKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// Merges another camera's table into this one.
    pub fn extend(&mut self, other: EmbeddingTable) -> Result<()> {
        if self.rows.is_empty() && self.dim == 0 {
            self.dim = other.dim;
        }
        if other.dim != self.dim && !other.rows.is_empty() {
            return Err(Error::Dimension {
                expected: self.dim,
                found: other.dim,
                context: "embedding tables from different cameras".into(),
            });
        }
        self.rows.extend(other.rows);
        Ok(())
    }
}

/// Per-frame class probabilities for one metadata attribute (type, brand, color, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetadataTable {
    pub attribute: String,
    pub class_count: usize,
    pub rows: BTreeMap<DetKey, Vec<f64>>,
}

impl MetadataTable {
    pub fn get(&self, key: &DetKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn extend(&mut self, other: MetadataTable) -> Result<()> {
        if self.rows.is_empty() && self.class_count == 0 {
            self.attribute = other.attribute.clone();
            self.class_count = other.class_count;
        }
        if other.attribute != self.attribute {
            return Err(Error::validation(format!(
                "cannot merge metadata attribute {} into {}",
                other.attribute, self.attribute
            )));
        }
        if other.class_count != self.class_count {
            return Err(Error::Dimension {
                expected: self.class_count,
                found: other.class_count,
                context: format!("metadata attribute {}", self.attribute),
            });
        }
        self.rows.extend(other.rows);
        Ok(())
    }
}

/// Wheel keypoints of one detection, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelKeypoints {
    pub front_left: (f64, f64),
    pub front_right: (f64, f64),
    pub back_left: (f64, f64),
    pub back_right: (f64, f64),
}

/// One row of an identity-labelled track file
/// (`camera_id,frame,id,x,y,w,h`): ground truth, SCT output or final output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub camera_id: u32,
    pub frame: i64,
    pub id: u64,
    pub bbox: BBox,
}

/// Identity → camera → frame-sorted boxes.
pub type TrackSet = BTreeMap<u64, BTreeMap<u32, Vec<(i64, BBox)>>>;

/// Formats a real with six significant digits, trimming trailing zeros.
pub fn format_real(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).clamp(0, 15) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, fields)` for every non-blank line.
fn csv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        if l.is_empty() {
            None
        } else {
            Some((i + 1, l.split(',').map(str::trim).collect()))
        }
    })
}

fn field<T: FromStr>(path: &Path, line: usize, raw: &str, name: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {name} {raw:?}"),
    })
}

fn finite(path: &Path, line: usize, raw: &str, name: &str) -> Result<f64> {
    let v: f64 = field(path, line, raw, name)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::validation(format!(
            "{}: line {line}: non-finite {name} {raw:?}",
            path.display()
        )))
    }
}

fn expect_columns(path: &Path, line: usize, fields: &[&str], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&fields.len()) {
        Ok(())
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("expected {allowed:?} columns, found {}", fields.len()),
        })
    }
}

pub fn parse_detections_str(text: &str, camera_id: u32, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, f) in csv_lines(text) {
        expect_columns(path, line, &f, &[6, 7])?;
        let frame: i64 = field(path, line, f[0], "frame")?;
        let det_index: u32 = field(path, line, f[1], "det_index")?;
        let bbox = BBox::new(
            finite(path, line, f[2], "x")?,
            finite(path, line, f[3], "y")?,
            finite(path, line, f[4], "w")?,
            finite(path, line, f[5], "h")?,
        );
        let confidence = match f.get(6) {
            Some(raw) => finite(path, line, raw, "confidence")?,
            None => 1.0,
        };
        if bbox.w <= 0.0 || bbox.h <= 0.0 {
            return Err(Error::validation(format!(
                "{}: line {line}: non-positive box size",
                path.display()
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!(
                "{}: line {line}: confidence {confidence} outside [0,1]",
                path.display()
            )));
        }
        if !seen.insert((frame, det_index)) {
            return Err(Error::validation(format!(
                "{}: line {line}: duplicate detection (frame {frame}, det {det_index})",
                path.display()
            )));
        }
        out.push(Detection {
            camera_id,
            frame,
            det_index,
            bbox,
            confidence,
        });
    }
    out.sort_by_key(|d| (d.frame, d.det_index));
    Ok(out)
}

/// Reads `frame,det_index,x,y,w,h[,confidence]` rows for one camera.
pub fn parse_detections(path: &Path, camera_id: u32) -> Result<Vec<Detection>> {
    parse_detections_str(&read_text(path)?, camera_id, path)
}

pub fn write_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.frame,
            d.det_index,
            format_real(b.x),
            format_real(b.y),
            format_real(b.w),
            format_real(b.h),
            format_real(d.confidence)
        );
    }
    s
}

/// Parses the `key=value,key=value` header line of a sidecar file.
fn parse_header<'a>(path: &Path, text: &'a str) -> Result<(BTreeMap<&'a str, &'a str>, &'a str)> {
    let (first, rest) = match text.find('\n') {
        Some(i) => (&text[..i], &text[i + 1..]),
        None => (text, ""),
    };
    let mut kv = BTreeMap::new();
    for part in first.trim().split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected key=value header, found {part:?}"),
        })?;
        kv.insert(k.trim(), v.trim());
    }
    Ok((kv, rest))
}

fn header_value<T: FromStr>(path: &Path, kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = kv.get(key).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("header is missing {key}="),
    })?;
    field(path, 1, raw, key)
}

/// Parses vector rows `frame,det_index,v1..vN` after the header; line numbers
/// are reported relative to the whole file.
fn parse_vector_rows(
    path: &Path,
    body: &str,
    camera_id: u32,
    width: usize,
    what: &str,
) -> Result<BTreeMap<DetKey, Vec<f64>>> {
    let mut rows = BTreeMap::new();
    for (line, f) in csv_lines(body) {
        let line = line + 1;
        if f.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected frame,det_index,values...".into(),
            });
        }
        let key = DetKey {
            camera_id,
            frame: field(path, line, f[0], "frame")?,
            det_index: field(path, line, f[1], "det_index")?,
        };
        let values = &f[2..];
        if values.len() != width {
            return Err(Error::Dimension {
                expected: width,
                found: values.len(),
                context: format!("{what} row for {key} at {}:{line}", path.display()),
            });
        }
        let mut v = Vec::with_capacity(width);
        for raw in values {
            let x: f64 = field(path, line, raw, "value")?;
            if !x.is_finite() {
                return Err(Error::validation(format!(
                    "{}: line {line}: non-finite {what} entry {raw:?}",
                    path.display()
                )));
            }
            v.push(x);
        }
        if rows.insert(key, v).is_some() {
            return Err(Error::validation(format!(
                "{}: line {line}: duplicate {what} row for {key}",
                path.display()
            )));
        }
    }
    Ok(rows)
}

fn check_coverage<V>(rows: &BTreeMap<DetKey, V>, detections: &[Detection], what: &str) -> Result<()> {
    match detections.iter().find(|d| !rows.contains_key(&d.key())) {
        Some(d) => Err(Error::Coverage(format!("no {what} for detection {}", d.key()))),
        None => Ok(()),
    }
}

pub fn parse_embeddings_str(
    text: &str,
    path: &Path,
    camera_id: u32,
    detections: &[Detection],
) -> Result<EmbeddingTable> {
    let (kv, body) = parse_header(path, text)?;
    let dim: usize = header_value(path, &kv, "dim")?;
    let rows = parse_vector_rows(path, body, camera_id, dim, "embedding")?;
    check_coverage(&rows, detections, "embedding")?;
    Ok(EmbeddingTable { dim, rows })
}

/// Reads an embedding sidecar (`dim=<D>` header) and checks that every
/// detection of the camera has a vector.
pub fn parse_embeddings(path: &Path, camera_id: u32, detections: &[Detection]) -> Result<EmbeddingTable> {
    parse_embeddings_str(&read_text(path)?, path, camera_id, detections)
}

fn write_vector_rows(s: &mut String, rows: &BTreeMap<DetKey, Vec<f64>>) {
    for (k, v) in rows {
        let _ = write!(s, "{},{}", k.frame, k.det_index);
        for x in v {
            s.push(',');
            s.push_str(&format_real(*x));
        }
        s.push('\n');
    }
}

pub fn write_embeddings(table: &EmbeddingTable) -> String {
    let mut s = format!("dim={}\n", table.dim);
    write_vector_rows(&mut s, &table.rows);
    s
}

pub fn parse_metadata_str(text: &str, path: &Path, camera_id: u32, detections: &[Detection]) -> Result<MetadataTable> {
    let (kv, body) = parse_header(path, text)?;
    let attribute: String = header_value(path, &kv, "attribute")?;
    let class_count: usize = header_value(path, &kv, "classes")?;
    let rows = parse_vector_rows(path, body, camera_id, class_count, "metadata")?;
    for (key, p) in &rows {
        if p.iter().any(|&x| x < 0.0) {
            return Err(Error::validation(format!(
                "negative probability for {key} in {attribute}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "probabilities for {key} in {attribute} sum to {sum}"
            )));
        }
    }
    check_coverage(&rows, detections, &format!("{attribute} metadata"))?;
    Ok(MetadataTable {
        attribute,
        class_count,
        rows,
    })
}

/// Reads a metadata sidecar (`attribute=<name>,classes=<K>` header).
pub fn parse_metadata(path: &Path, camera_id: u32, detections: &[Detection]) -> Result<MetadataTable> {
    parse_metadata_str(&read_text(path)?, path, camera_id, detections)
}

pub fn write_metadata(table: &MetadataTable) -> String {
    let mut s = format!("attribute={},classes={}\n", table.attribute, table.class_count);
    write_vector_rows(&mut s, &table.rows);
    s
}

pub fn parse_keypoints_str(text: &str, path: &Path) -> Result<BTreeMap<DetKey, WheelKeypoints>> {
    let mut out = BTreeMap::new();
    for (line, f) in csv_lines(text) {
        expect_columns(path, line, &f, &[11])?;
        let key = DetKey {
            camera_id: field(path, line, f[0], "camera_id")?,
            frame: field(path, line, f[1], "frame")?,
            det_index: field(path, line, f[2], "det_index")?,
        };
        let mut c = [0.0; 8];
        for (i, raw) in f[3..].iter().enumerate() {
            c[i] = finite(path, line, raw, "coordinate")?;
        }
        let kp = WheelKeypoints {
            front_left: (c[0], c[1]),
            front_right: (c[2], c[3]),
            back_left: (c[4], c[5]),
            back_right: (c[6], c[7]),
        };
        if out.insert(key, kp).is_some() {
            return Err(Error::validation(format!(
                "{}: line {line}: duplicate keypoints for {key}",
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Reads `camera_id,frame,det_index,xfl,yfl,xfr,yfr,xbl,ybl,xbr,ybr` rows.
pub fn parse_keypoints(path: &Path) -> Result<BTreeMap<DetKey, WheelKeypoints>> {
    parse_keypoints_str(&read_text(path)?, path)
}

pub fn write_keypoints(rows: &BTreeMap<DetKey, WheelKeypoints>) -> String {
    let mut s = String::new();
    for (k, kp) in rows {
        let _ = write!(s, "{},{},{}", k.camera_id, k.frame, k.det_index);
        for (x, y) in [kp.front_left, kp.front_right, kp.back_left, kp.back_right] {
            let _ = write!(s, ",{},{}", format_real(x), format_real(y));
        }
        s.push('\n');
    }
    s
}

pub fn parse_track_rows_str(text: &str, path: &Path) -> Result<Vec<TrackRow>> {
    let mut out = Vec::new();
    for (line, f) in csv_lines(text) {
        expect_columns(path, line, &f, &[7])?;
        let bbox = BBox::new(
            finite(path, line, f[3], "x")?,
            finite(path, line, f[4], "y")?,
            finite(path, line, f[5], "w")?,
            finite(path, line, f[6], "h")?,
        );
        if bbox.w <= 0.0 || bbox.h <= 0.0 {
            return Err(Error::validation(format!(
                "{}: line {line}: non-positive box size",
                path.display()
            )));
        }
        out.push(TrackRow {
            camera_id: field(path, line, f[0], "camera_id")?,
            frame: field(path, line, f[1], "frame")?,
            id: field(path, line, f[2], "id")?,
            bbox,
        });
    }
    Ok(out)
}

/// Groups rows by identity and camera; rejects a repeated (camera, frame, id).
pub fn track_set_from_rows(rows: &[TrackRow]) -> Result<TrackSet> {
    let mut set = TrackSet::new();
    for r in rows {
        set.entry(r.id)
            .or_default()
            .entry(r.camera_id)
            .or_default()
            .push((r.frame, r.bbox));
    }
    for (id, cams) in set.iter_mut() {
        for (cam, seq) in cams.iter_mut() {
            seq.sort_by_key(|(f, _)| *f);
            if let Some(w) = seq.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::validation(format!(
                    "duplicate row for camera {cam}, frame {}, id {id}",
                    w[0].0
                )));
            }
        }
    }
    Ok(set)
}

pub fn parse_ground_truth_str(text: &str, path: &Path) -> Result<TrackSet> {
    track_set_from_rows(&parse_track_rows_str(text, path)?)
}

/// Reads `camera_id,frame,global_id,x,y,w,h` rows into per-identity,
/// per-camera, frame-sorted sequences.
pub fn parse_ground_truth(path: &Path) -> Result<TrackSet> {
    parse_ground_truth_str(&read_text(path)?, path)
}

/// Writes rows sorted by (camera, frame, id).
pub fn write_track_rows(rows: &[TrackRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| (r.camera_id, r.frame, r.id));
    let mut s = String::new();
    for r in &sorted {
        let b = r.bbox;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.camera_id,
            r.frame,
            r.id,
            format_real(b.x),
            format_real(b.y),
            format_real(b.w),
            format_real(b.h)
        );
    }
    s
}

pub fn track_set_rows(set: &TrackSet) -> Vec<TrackRow> {
    let mut rows = Vec::new();
    for (&id, cams) in set {
        for (&camera_id, seq) in cams {
            for &(frame, bbox) in seq {
                rows.push(TrackRow {
                    camera_id,
                    frame,
                    id,
                    bbox,
                });
            }
        }
    }
    rows
}
