//! Single-camera tracking: frame-to-frame association into tracklets, then
//! agglomerative clustering of tracklets into per-camera trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::FusedFeature;
use crate::geometry::{cosine_similarity, iou, BBox};
use crate::ingest::{Detection, EmbeddingTable};

/// Weight of IOU (and, complementarily, appearance) in the association score.
const ASSOC_IOU_WEIGHT: f64 = 0.5;
/// Detections used to estimate a tracklet's velocity.
const VELOCITY_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub camera_id: u32,
    pub detections: Vec<Detection>,
    pub mean_embedding: Vec<f64>,
}

impl Tracklet {
    pub fn first_frame(&self) -> i64 {
        self.detections[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.detections[self.detections.len() - 1].frame
    }

    /// Box of the last detection moved `frames` ahead at the tracklet's
    /// recent constant velocity.
    pub fn extrapolate(&self, frames: i64) -> BBox {
        let last = self.detections[self.detections.len() - 1];
        let k = self.detections.len().saturating_sub(VELOCITY_WINDOW);
        let anchor = self.detections[k];
        let span = (last.frame - anchor.frame) as f64;
        if span <= 0.0 {
            return last.bbox;
        }
        let (lx, ly) = last.bbox.center();
        let (ax, ay) = anchor.bbox.center();
        let (vx, vy) = ((lx - ax) / span, (ly - ay) / span);
        last.bbox.translated(vx * frames as f64, vy * frames as f64)
    }
}

/// A complete per-camera track for one local identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub camera_id: u32,
    pub local_id: u64,
    pub detections: Vec<Detection>,
    pub fused: Option<FusedFeature>,
    pub zone_pair: Option<u32>,
}

impl Trajectory {
    pub fn new(camera_id: u32, local_id: u64, mut detections: Vec<Detection>) -> Self {
        detections.sort_by_key(|d| (d.frame, d.det_index));
        Self {
            camera_id,
            local_id,
            detections,
            fused: None,
            zone_pair: None,
        }
    }

    pub fn start_frame(&self) -> i64 {
        self.detections[0].frame
    }

    pub fn end_frame(&self) -> i64 {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn first_box(&self) -> BBox {
        self.detections[0].bbox
    }

    pub fn last_box(&self) -> BBox {
        self.detections[self.detections.len() - 1].bbox
    }

    /// Center of the first box.
    pub fn entry_point(&self) -> (f64, f64) {
        self.first_box().center()
    }

    /// Center of the last box.
    pub fn exit_point(&self) -> (f64, f64) {
        self.last_box().center()
    }

    pub fn overlaps_in_time(&self, other: &Trajectory) -> bool {
        self.start_frame() <= other.end_frame() && other.start_frame() <= self.end_frame()
    }

    pub fn mean_embedding(&self, embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
        mean_embedding(&self.detections, embeddings)
    }
}

fn embedding_of<'a>(d: &Detection, embeddings: &'a EmbeddingTable) -> Result<&'a [f64]> {
    embeddings
        .get(&d.key())
        .ok_or_else(|| Error::Coverage(format!("no embedding for detection {}", d.key())))
}

pub(crate) fn mean_embedding(dets: &[Detection], embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; embeddings.dim];
    for d in dets {
        for (a, x) in acc.iter_mut().zip(embedding_of(d, embeddings)?) {
            *a += x;
        }
    }
    let n = dets.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

struct OpenTrack {
    dets: Vec<Detection>,
    emb_sum: Vec<f64>,
}

impl OpenTrack {
    fn last(&self) -> &Detection {
        &self.dets[self.dets.len() - 1]
    }

    fn push(&mut self, d: Detection, emb: &[f64]) {
        self.dets.push(d);
        for (a, x) in self.emb_sum.iter_mut().zip(emb) {
            *a += x;
        }
    }

    fn into_tracklet(self) -> Tracklet {
        let n = self.dets.len() as f64;
        Tracklet {
            camera_id: self.dets[0].camera_id,
            mean_embedding: self.emb_sum.iter().map(|x| x / n).collect(),
            detections: self.dets,
        }
    }
}

/// Combined association score of an open track and a detection.
fn association_score(track_box: &BBox, track_emb: &[f64], det_box: &BBox, det_emb: &[f64]) -> (f64, f64) {
    let overlap = iou(track_box, det_box);
    let sim = cosine_similarity(track_emb, det_emb);
    (ASSOC_IOU_WEIGHT * overlap + (1.0 - ASSOC_IOU_WEIGHT) * sim, overlap)
}

/// Greedy frame-to-frame association of one camera's detections.
///
/// Each frame, open tracks and detections are paired in descending order of
/// `0.5·iou + 0.5·cosine`, skipping pairs whose IOU is below
/// `iou_assoc_threshold`. Tracks unmatched for more than `gap_frames` frames
/// are closed; unmatched detections open new tracks.
pub fn associate_detections(
    detections: &[Detection],
    embeddings: &EmbeddingTable,
    config: &PipelineConfig,
) -> Result<Vec<Tracklet>> {
    let mut by_frame: BTreeMap<i64, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let mut open: Vec<OpenTrack> = Vec::new();
    let mut closed: Vec<Tracklet> = Vec::new();
    let max_skip = config.gap_frames as i64;

    for (&frame, dets) in &by_frame {
        let mut dets = dets.clone();
        dets.sort_by_key(|d| d.det_index);

        let (alive, expired): (Vec<_>, Vec<_>) = open.into_iter().partition(|t| frame - t.last().frame - 1 <= max_skip);
        closed.extend(expired.into_iter().map(OpenTrack::into_tracklet));
        open = alive;

        let det_embs: Vec<&[f64]> = dets
            .iter()
            .map(|d| embedding_of(d, embeddings))
            .collect::<Result<_>>()?;

        let mut candidates = Vec::new();
        for (ti, t) in open.iter().enumerate() {
            let n = t.dets.len() as f64;
            let mean: Vec<f64> = t.emb_sum.iter().map(|x| x / n).collect();
            for (di, d) in dets.iter().enumerate() {
                let (score, overlap) = association_score(&t.last().bbox, &mean, &d.bbox, det_embs[di]);
                if overlap >= config.iou_assoc_threshold && overlap > 0.0 {
                    candidates.push((score, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut track_used = vec![false; open.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, ti, di) in candidates {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            open[ti].push(*dets[di], det_embs[di]);
        }
        for (di, d) in dets.iter().enumerate() {
            if !det_used[di] {
                let mut t = OpenTrack {
                    dets: Vec::new(),
                    emb_sum: vec![0.0; embeddings.dim],
                };
                t.push(**d, det_embs[di]);
                open.push(t);
            }
        }
    }
    closed.extend(open.into_iter().map(OpenTrack::into_tracklet));
    closed.sort_by_key(|t| (t.first_frame(), t.detections[0].det_index));
    Ok(closed)
}

/// Deterministic tracklet linking cost; `None` when the pair cannot belong to
/// the same vehicle (temporal overlap or a gap beyond `gap_max`).
pub fn tracklet_edge_cost(t1: &Tracklet, t2: &Tracklet, config: &PipelineConfig) -> Option<f64> {
    if t1.camera_id != t2.camera_id || t1.last_frame() >= t2.first_frame() {
        return None;
    }
    let gap = t2.first_frame() - t1.last_frame();
    if gap > config.gap_max as i64 {
        return None;
    }
    let appearance = 1.0 - cosine_similarity(&t1.mean_embedding, &t2.mean_embedding);
    let temporal = gap as f64 / config.gap_max as f64;
    let motion = 1.0 - iou(&t1.extrapolate(gap), &t2.detections[0].bbox);
    Some(
        config.edge_weight_appearance * appearance
            + config.edge_weight_temporal * temporal
            + config.edge_weight_motion * motion,
    )
}

/// Edges `(cost, earlier, later)` between every compatible tracklet pair,
/// sorted ascending with ties broken by index.
pub fn tracklet_edges(tracklets: &[Tracklet], config: &PipelineConfig) -> Vec<(f64, usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..tracklets.len() {
        for j in 0..tracklets.len() {
            if i == j {
                continue;
            }
            if let Some(c) = tracklet_edge_cost(&tracklets[i], &tracklets[j], config) {
                edges.push((c, i.min(j), i.max(j)));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    edges
}

/// Partition of tracklet indices produced by greedy merging.
pub fn cluster_tracklet_groups(tracklets: &[Tracklet], config: &PipelineConfig) -> Vec<Vec<usize>> {
    let n = tracklets.len();
    let mut group: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut span: Vec<(i64, i64)> = tracklets.iter().map(|t| (t.first_frame(), t.last_frame())).collect();

    for (cost, i, j) in tracklet_edges(tracklets, config) {
        if cost >= config.tracklet_merge_threshold {
            break;
        }
        let (gi, gj) = (group[i], group[j]);
        if gi == gj {
            continue;
        }
        let (a, b) = (span[gi], span[gj]);
        if a.0 <= b.1 && b.0 <= a.1 {
            continue;
        }
        let (keep, drop) = (gi.min(gj), gi.max(gj));
        let moved = std::mem::take(&mut members[drop]);
        for &m in &moved {
            group[m] = keep;
        }
        members[keep].extend(moved);
        span[keep] = (a.0.min(b.0), a.1.max(b.1));
    }

    let mut groups: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| {
        let first = &tracklets[g[0]].detections[0];
        (first.frame, first.det_index)
    });
    groups
}

/// Merges tracklets into trajectories; local IDs are assigned from 1 in order
/// of each trajectory's first (frame, det_index).
pub fn cluster_tracklets(tracklets: &[Tracklet], config: &PipelineConfig) -> Vec<Trajectory> {
    cluster_tracklet_groups(tracklets, config)
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            let dets: Vec<Detection> = g
                .iter()
                .flat_map(|&i| tracklets[i].detections.iter().copied())
                .collect();
            Trajectory::new(tracklets[g[0]].camera_id, k as u64 + 1, dets)
        })
        .collect()
}

/// Association followed by tracklet clustering for one camera.
pub fn track_camera(
    detections: &[Detection],
    embeddings: &EmbeddingTable,
    config: &PipelineConfig,
) -> Result<Vec<Trajectory>> {
    let tracklets = associate_detections(detections, embeddings, config)?;
    Ok(cluster_tracklets(&tracklets, config))
}
