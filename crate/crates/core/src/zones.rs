//! Entry, exit and traffic-aware zones inferred from trajectory endpoints,
//! and FIFO reconnection of trajectories split inside traffic-aware zones.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, iou, BBox};
use crate::ingest::{format_real, EmbeddingTable};
use crate::sct::Trajectory;

pub const MEAN_SHIFT_TOL: f64 = 1e-3;
pub const MEAN_SHIFT_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftResult {
    pub centroids: Vec<(f64, f64)>,
    /// Index into `centroids` for every input point.
    pub labels: Vec<usize>,
    /// Update steps taken from each seed.
    pub iterations: Vec<usize>,
}

/// `exp(-‖d‖ / (2σ²))`. The exponent uses the distance, not its square.
pub fn kernel(distance: f64, bandwidth: f64) -> f64 {
    (-distance / (2.0 * bandwidth * bandwidth)).exp()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// One mean-shift update: kernel-weighted mean of the points within
/// `bandwidth` of `c`, or `None` if the neighborhood is empty.
pub fn shift_step(points: &[(f64, f64)], c: (f64, f64), bandwidth: f64) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for &p in points {
        let d = dist(p, c);
        if d <= bandwidth {
            let k = kernel(d, bandwidth);
            sx += k * p.0;
            sy += k * p.1;
            sw += k;
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

/// MeanShift seeded at every point. Converged modes closer than half the
/// bandwidth are merged, keeping the mode with the most points within the
/// bandwidth; every point is then labelled with its nearest surviving mode.
pub fn mean_shift(points: &[(f64, f64)], bandwidth: f64) -> Result<MeanShiftResult> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::validation(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::validation("non-finite point passed to mean shift"));
    }
    if points.is_empty() {
        return Ok(MeanShiftResult {
            centroids: Vec::new(),
            labels: Vec::new(),
            iterations: Vec::new(),
        });
    }

    let mut modes = Vec::with_capacity(points.len());
    let mut iterations = Vec::with_capacity(points.len());
    for &seed in points {
        let mut c = seed;
        let mut steps = 0;
        while steps < MEAN_SHIFT_MAX_ITER {
            steps += 1;
            let Some(next) = shift_step(points, c, bandwidth) else {
                break;
            };
            let moved = dist(next, c);
            c = next;
            if moved < MEAN_SHIFT_TOL {
                break;
            }
        }
        modes.push(c);
        iterations.push(steps);
    }

    let intensity: Vec<usize> = modes
        .iter()
        .map(|&m| points.iter().filter(|&&p| dist(p, m) <= bandwidth).count())
        .collect();
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| intensity[b].cmp(&intensity[a]).then(a.cmp(&b)));
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| dist(k, modes[i]) >= bandwidth / 2.0) {
            kept.push(modes[i]);
        }
    }

    let nearest = |p: (f64, f64), cs: &[(f64, f64)]| {
        let mut best = 0;
        for (i, &c) in cs.iter().enumerate() {
            if dist(p, c) < dist(p, cs[best]) {
                best = i;
            }
        }
        best
    };
    let raw: Vec<usize> = points.iter().map(|&p| nearest(p, &kept)).collect();
    // drop modes that attracted no point and re-index
    let mut remap = vec![usize::MAX; kept.len()];
    let mut centroids = Vec::new();
    for &r in &raw {
        if remap[r] == usize::MAX {
            remap[r] = centroids.len();
            centroids.push(kept[r]);
        }
    }
    Ok(MeanShiftResult {
        centroids,
        labels: raw.iter().map(|&r| remap[r]).collect(),
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneClass {
    Entry,
    Exit,
    TrafficAware,
    DontCare,
}

impl ZoneClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ZoneClass::Entry => "entry",
            ZoneClass::Exit => "exit",
            ZoneClass::TrafficAware => "traffic_aware",
            ZoneClass::DontCare => "dont_care",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "entry" => ZoneClass::Entry,
            "exit" => ZoneClass::Exit,
            "traffic_aware" => ZoneClass::TrafficAware,
            "dont_care" => ZoneClass::DontCare,
            _ => return None,
        })
    }

    pub fn can_start_pair(&self) -> bool {
        matches!(self, ZoneClass::Entry | ZoneClass::TrafficAware)
    }

    pub fn can_end_pair(&self) -> bool {
        matches!(self, ZoneClass::Exit | ZoneClass::TrafficAware)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub camera_id: u32,
    pub zone_id: u32,
    pub bbox: BBox,
    pub n_entry: usize,
    pub n_exit: usize,
    pub class: ZoneClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Entry,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointSample {
    pub point: (f64, f64),
    pub kind: EndpointKind,
    pub trajectory_ref: (u32, u64),
    pub bbox: BBox,
}

pub fn endpoint_samples(trajectories: &[Trajectory]) -> Vec<EndpointSample> {
    trajectories
        .iter()
        .flat_map(|t| {
            let r = (t.camera_id, t.local_id);
            [
                EndpointSample {
                    point: t.entry_point(),
                    kind: EndpointKind::Entry,
                    trajectory_ref: r,
                    bbox: t.first_box(),
                },
                EndpointSample {
                    point: t.exit_point(),
                    kind: EndpointKind::Exit,
                    trajectory_ref: r,
                    bbox: t.last_box(),
                },
            ]
        })
        .collect()
}

/// `(D_e, D_x, D_ta)` for a zone's entry and exit counts.
pub fn zone_densities(n_entry: usize, n_exit: usize) -> Result<(f64, f64, f64)> {
    let total = n_entry + n_exit;
    if total == 0 {
        return Err(Error::validation("zone has neither entry nor exit points"));
    }
    let t = total as f64;
    let de = n_entry as f64 / t;
    let dx = n_exit as f64 / t;
    let dta = 1.0 - (n_entry as f64 - n_exit as f64).abs() / t;
    Ok((de, dx, dta))
}

/// Entry is tested first, then exit, then traffic-aware.
pub fn classify_zone(n_entry: usize, n_exit: usize, config: &PipelineConfig) -> Result<ZoneClass> {
    let (de, dx, dta) = zone_densities(n_entry, n_exit)?;
    Ok(if de > config.rho_entry {
        ZoneClass::Entry
    } else if dx > config.rho_exit {
        ZoneClass::Exit
    } else if dta > config.rho_traffic_aware {
        ZoneClass::TrafficAware
    } else {
        ZoneClass::DontCare
    })
}

/// Zones of one camera from its trajectories' entry and exit points.
pub fn build_zones(trajectories: &[Trajectory], config: &PipelineConfig) -> Result<Vec<Zone>> {
    let samples = endpoint_samples(trajectories);
    let Some(camera_id) = trajectories.first().map(|t| t.camera_id) else {
        return Ok(Vec::new());
    };
    if trajectories.iter().any(|t| t.camera_id != camera_id) {
        return Err(Error::validation(
            "build_zones expects trajectories from a single camera",
        ));
    }
    let points: Vec<(f64, f64)> = samples.iter().map(|s| s.point).collect();
    let ms = mean_shift(&points, config.bandwidth)?;

    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ms.labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    let mut members: Vec<Vec<usize>> = clusters
        .into_values()
        .filter(|m| m.len() >= config.min_zone_points)
        .collect();
    members.sort_by_key(|m| m[0]);

    let mut zones = Vec::with_capacity(members.len());
    for (k, m) in members.iter().enumerate() {
        let tight = BBox::enclosing(m.iter().map(|&i| samples[i].point)).expect("non-empty cluster");
        let mean_box_area = m.iter().map(|&i| samples[i].bbox.area()).sum::<f64>() / m.len() as f64;
        let bbox = tight.grown_to_area(config.zone_min_area_ratio * mean_box_area);
        let n_entry = m.iter().filter(|&&i| samples[i].kind == EndpointKind::Entry).count();
        let n_exit = m.len() - n_entry;
        zones.push(Zone {
            camera_id,
            zone_id: k as u32,
            bbox,
            n_entry,
            n_exit,
            class: classify_zone(n_entry, n_exit, config)?,
        });
    }
    Ok(zones)
}

pub fn write_zones(zones: &[Zone]) -> String {
    let mut s = String::new();
    for z in zones {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            z.camera_id,
            z.zone_id,
            z.class.as_str(),
            format_real(z.bbox.x),
            format_real(z.bbox.y),
            format_real(z.bbox.w),
            format_real(z.bbox.h),
            z.n_entry,
            z.n_exit
        );
    }
    s
}

pub fn parse_zones_str(text: &str, path: &Path) -> Result<Vec<Zone>> {
    let mut zones = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if f.len() != 9 {
            return Err(bad(format!("expected 9 columns, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("invalid number {:?}", f[k])))
        };
        let int = |k: usize| -> Result<usize> { f[k].parse().map_err(|_| bad(format!("invalid count {:?}", f[k]))) };
        zones.push(Zone {
            camera_id: f[0].parse().map_err(|_| bad(format!("invalid camera {:?}", f[0])))?,
            zone_id: f[1].parse().map_err(|_| bad(format!("invalid zone id {:?}", f[1])))?,
            class: ZoneClass::parse(f[2]).ok_or_else(|| bad(format!("unknown zone class {:?}", f[2])))?,
            bbox: BBox::new(num(3)?, num(4)?, num(5)?, num(6)?),
            n_entry: int(7)?,
            n_exit: int(8)?,
        });
    }
    Ok(zones)
}

pub fn parse_zones(path: &Path) -> Result<Vec<Zone>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_zones_str(&text, path)
}

/// The zone (highest overlap, then lowest id) holding at least
/// `min_overlap` of `bbox`.
pub fn zone_containing<'a>(
    bbox: &BBox,
    zones: impl IntoIterator<Item = &'a Zone>,
    min_overlap: f64,
) -> Option<&'a Zone> {
    let mut best: Option<(&Zone, f64)> = None;
    for z in zones {
        let r = bbox.overlap_ratio(&z.bbox);
        if r >= min_overlap && r > 0.0 && best.is_none_or(|(_, b)| r > b) {
            best = Some((z, r));
        }
    }
    best.map(|(z, _)| z)
}

/// One accepted reconnection inside a traffic-aware zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub camera_id: u32,
    pub zone_id: u32,
    /// Local ID of the trajectory that vanished (and whose ID survives).
    pub exit_local_id: u64,
    pub exit_frame: i64,
    pub entry_local_id: u64,
    pub entry_frame: i64,
    /// Local ID of the merged trajectory the exit segment belonged to.
    pub merged_into: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconnection {
    pub trajectories: Vec<Trajectory>,
    pub merges: Vec<MergeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Exit,
    Entry,
}

struct Waiting {
    segment: usize,
    exit_frame: i64,
    last_box: BBox,
}

fn find_root(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Rejoins trajectories that end and later restart inside the same
/// traffic-aware zone, first-in first-out.
///
/// Events are replayed in time order. A trajectory whose last box lies in a
/// traffic-aware zone joins that zone's queue; a trajectory whose first box
/// lies in the zone is compared against the queue head only, and is merged
/// into it when the boxes overlap with IOU ≥ `iou_reconnect_threshold` and
/// the mean embeddings have cosine similarity ≥
/// `appearance_reconnect_threshold`. A rejected head stays queued until it is
/// older than `reconnect_ttl_frames`.
pub fn reconnect_isolated(
    trajectories: &[Trajectory],
    zones: &[Zone],
    embeddings: &EmbeddingTable,
    config: &PipelineConfig,
) -> Result<Reconnection> {
    let ta: Vec<&Zone> = zones.iter().filter(|z| z.class == ZoneClass::TrafficAware).collect();
    let n = trajectories.len();
    let means: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| t.mean_embedding(embeddings))
        .collect::<Result<_>>()?;

    let mut events: Vec<(i64, EventKind, usize, u32)> = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        let cam_zones = ta.iter().copied().filter(|z| z.camera_id == t.camera_id);
        if let Some(z) = zone_containing(&t.last_box(), cam_zones.clone(), config.zone_membership_overlap) {
            events.push((t.end_frame(), EventKind::Exit, i, z.zone_id));
        }
        if let Some(z) = zone_containing(&t.first_box(), cam_zones, config.zone_membership_overlap) {
            events.push((t.start_frame(), EventKind::Entry, i, z.zone_id));
        }
    }
    events.sort();

    let mut parent: Vec<usize> = (0..n).collect();
    let mut span: Vec<(i64, i64)> = trajectories.iter().map(|t| (t.start_frame(), t.end_frame())).collect();
    let mut queues: BTreeMap<(u32, u32), VecDeque<Waiting>> = BTreeMap::new();
    let mut merges = Vec::new();
    let ttl = config.reconnect_ttl_frames as i64;

    for (frame, kind, seg, zone_id) in events {
        let key = (trajectories[seg].camera_id, zone_id);
        let queue = queues.entry(key).or_default();
        match kind {
            EventKind::Exit => queue.push_back(Waiting {
                segment: seg,
                exit_frame: frame,
                last_box: trajectories[seg].last_box(),
            }),
            EventKind::Entry => {
                while queue.front().is_some_and(|h| frame - h.exit_frame > ttl) {
                    queue.pop_front();
                }
                let Some(head) = queue.front() else { continue };
                let head_root = find_root(&mut parent, head.segment);
                let new_root = find_root(&mut parent, seg);
                if head_root == new_root {
                    continue;
                }
                let (a, b) = (span[head_root], span[new_root]);
                let disjoint = a.1 < b.0 || b.1 < a.0;
                let accept = disjoint
                    && head.exit_frame < frame
                    && iou(&head.last_box, &trajectories[seg].first_box()) >= config.iou_reconnect_threshold
                    && cosine_similarity(&means[head.segment], &means[seg]) >= config.appearance_reconnect_threshold;
                if !accept {
                    continue;
                }
                let head = queue.pop_front().expect("head exists");
                // the earlier trajectory keeps its identity
                let (keep, drop) = if a.0 <= b.0 {
                    (head_root, new_root)
                } else {
                    (new_root, head_root)
                };
                parent[drop] = keep;
                span[keep] = (a.0.min(b.0), a.1.max(b.1));
                merges.push(MergeRecord {
                    camera_id: key.0,
                    zone_id,
                    exit_local_id: trajectories[head.segment].local_id,
                    exit_frame: head.exit_frame,
                    entry_local_id: trajectories[seg].local_id,
                    entry_frame: frame,
                    merged_into: trajectories[keep].local_id,
                });
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find_root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Trajectory> = groups
        .into_iter()
        .map(|(root, segs)| {
            let root_t = &trajectories[root];
            let dets = segs
                .iter()
                .flat_map(|&s| trajectories[s].detections.iter().copied())
                .collect();
            Trajectory::new(root_t.camera_id, root_t.local_id, dets)
        })
        .collect();
    out.sort_by_key(|t| (t.camera_id, t.start_frame(), t.local_id));
    Ok(Reconnection {
        trajectories: out,
        merges,
    })
}
