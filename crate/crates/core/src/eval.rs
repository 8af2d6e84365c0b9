//! Identity (IDF1) and CLEAR-MOT evaluation of predicted tracks against
//! ground truth. Tracks are keyed by global identity and may span cameras.

use std::collections::{BTreeMap, BTreeSet};

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::ingest::TrackSet;

/// Fraction of its frames a ground-truth identity must be matched in to count
/// as mostly tracked.
pub const MOSTLY_TRACKED: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IdentityScores {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotScores {
    pub mota: f64,
    pub motp: f64,
    pub recall: f64,
    pub mt: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub gt_boxes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    #[serde(flatten)]
    pub identity: IdentityScores,
    #[serde(flatten)]
    pub mot: MotScores,
    pub gt_ids: u64,
    pub pred_ids: u64,
}

type Key = (u32, i64);

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Boxes per identity, keyed by (camera, frame).
fn flatten(set: &TrackSet) -> Vec<(u64, BTreeMap<Key, BBox>)> {
    set.iter()
        .map(|(id, cams)| {
            let boxes = cams
                .iter()
                .flat_map(|(cam, rows)| rows.iter().map(move |(f, b)| ((*cam, *f), *b)))
                .collect();
            (*id, boxes)
        })
        .collect()
}

/// Number of (camera, frame) keys where each GT/predicted identity pair
/// overlaps with IOU ≥ `threshold`.
fn match_counts(
    gt: &[(u64, BTreeMap<Key, BBox>)],
    pred: &[(u64, BTreeMap<Key, BBox>)],
    threshold: f64,
) -> Vec<Vec<u64>> {
    let mut by_key: BTreeMap<Key, Vec<(usize, BBox)>> = BTreeMap::new();
    for (g, (_, boxes)) in gt.iter().enumerate() {
        for (k, b) in boxes {
            by_key.entry(*k).or_default().push((g, *b));
        }
    }
    let mut counts = vec![vec![0u64; pred.len()]; gt.len()];
    for (p, (_, boxes)) in pred.iter().enumerate() {
        for (k, b) in boxes {
            for (g, gb) in by_key.get(k).map(Vec::as_slice).unwrap_or_default() {
                if iou(gb, b) >= threshold {
                    counts[*g][p] += 1;
                }
            }
        }
    }
    counts
}

/// Identity scores under the one-to-one identity matching that maximizes
/// the number of matched frames.
pub fn idf1(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> IdentityScores {
    let g = flatten(gt);
    let p = flatten(pred);
    let gt_len: u64 = g.iter().map(|(_, b)| b.len() as u64).sum();
    let pred_len: u64 = p.iter().map(|(_, b)| b.len() as u64).sum();
    let counts = match_counts(&g, &p, threshold);
    let size = g.len().max(p.len());
    let idtp = if size == 0 {
        0
    } else {
        let w = Matrix::from_fn(size, size, |(r, c)| {
            if r < g.len() && c < p.len() {
                counts[r][c] as i64
            } else {
                0
            }
        });
        kuhn_munkres(&w).0 as u64
    };
    let idfn = gt_len - idtp;
    let idfp = pred_len - idtp;
    IdentityScores {
        idf1: ratio(2.0 * idtp as f64, (2 * idtp + idfp + idfn) as f64),
        idp: ratio(idtp as f64, (idtp + idfp) as f64),
        idr: ratio(idtp as f64, (idtp + idfn) as f64),
        idtp,
        idfp,
        idfn,
    }
}

/// CLEAR-MOT scores. Frames are matched greedily by IOU after keeping
/// last frame's correspondences that still overlap.
pub fn clear_mot(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> MotScores {
    // (frame, camera) -> (gt boxes, predicted boxes)
    type Boxes = Vec<(u64, BBox)>;
    let mut frames: BTreeMap<(i64, u32), (Boxes, Boxes)> = BTreeMap::new();
    for (id, boxes) in flatten(gt) {
        for ((cam, f), b) in boxes {
            frames.entry((f, cam)).or_default().0.push((id, b));
        }
    }
    for (id, boxes) in flatten(pred) {
        for ((cam, f), b) in boxes {
            frames.entry((f, cam)).or_default().1.push((id, b));
        }
    }

    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut matched_frames: BTreeMap<u64, u64> = BTreeMap::new();
    let mut gt_frames: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut tp, mut fp, mut idsw, mut gt_boxes) = (0u64, 0u64, 0u64, 0u64);
    let mut iou_sum = 0.0;

    for (gts, preds) in frames.values() {
        gt_boxes += gts.len() as u64;
        for (g, _) in gts {
            *gt_frames.entry(*g).or_default() += 1;
        }
        let mut gt_used = vec![false; gts.len()];
        let mut pred_used = vec![false; preds.len()];
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();

        for (gi, (g, gb)) in gts.iter().enumerate() {
            let Some(prev) = last_match.get(g) else { continue };
            if let Some(pi) = preds.iter().position(|(p, _)| p == prev) {
                let v = iou(gb, &preds[pi].1);
                if !pred_used[pi] && v >= threshold {
                    gt_used[gi] = true;
                    pred_used[pi] = true;
                    pairs.push((gi, pi, v));
                }
            }
        }
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, (_, gb)) in gts.iter().enumerate().filter(|(i, _)| !gt_used[*i]) {
            for (pi, (_, pb)) in preds.iter().enumerate().filter(|(i, _)| !pred_used[*i]) {
                let v = iou(gb, pb);
                if v >= threshold {
                    candidates.push((v, gi, pi));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        for (v, gi, pi) in candidates {
            if !gt_used[gi] && !pred_used[pi] {
                gt_used[gi] = true;
                pred_used[pi] = true;
                pairs.push((gi, pi, v));
            }
        }

        for (gi, pi, v) in pairs {
            let g = gts[gi].0;
            let p = preds[pi].0;
            if last_match.insert(g, p).is_some_and(|prev| prev != p) {
                idsw += 1;
            }
            *matched_frames.entry(g).or_default() += 1;
            tp += 1;
            iou_sum += v;
        }
        fp += pred_used.iter().filter(|u| !**u).count() as u64;
    }

    let fn_ = gt_boxes - tp;
    let mt = gt_frames
        .iter()
        .filter(|(g, n)| matched_frames.get(g).copied().unwrap_or(0) as f64 >= MOSTLY_TRACKED * **n as f64)
        .count() as u64;
    MotScores {
        mota: 1.0 - ratio((fn_ + fp + idsw) as f64, gt_boxes as f64),
        motp: ratio(iou_sum, tp as f64),
        recall: ratio(tp as f64, gt_boxes as f64),
        mt,
        fp,
        fn_,
        idsw,
        gt_boxes,
    }
}

fn cameras(set: &TrackSet) -> BTreeSet<u32> {
    set.values().flat_map(|c| c.keys().copied()).collect()
}

/// Full report. Predictions on cameras absent from the ground truth are
/// rejected.
pub fn evaluate(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("IOU threshold {threshold} outside (0,1)")));
    }
    let gt_cams = cameras(gt);
    let extra: Vec<String> = cameras(pred).difference(&gt_cams).map(|c| c.to_string()).collect();
    if !extra.is_empty() {
        return Err(Error::validation(format!(
            "predictions contain cameras missing from ground truth: {}",
            extra.join(",")
        )));
    }
    Ok(EvalReport {
        iou_threshold: threshold,
        identity: idf1(pred, gt, threshold),
        mot: clear_mot(pred, gt, threshold),
        gt_ids: gt.len() as u64,
        pred_ids: pred.len() as u64,
    })
}

/// Tracks restricted to one camera, identities without boxes there dropped.
pub fn restrict_to_camera(set: &TrackSet, camera_id: u32) -> TrackSet {
    set.iter()
        .filter_map(|(id, cams)| {
            let rows = cams.get(&camera_id)?;
            Some((*id, BTreeMap::from([(camera_id, rows.clone())])))
        })
        .collect()
}

/// Report for each camera of the ground truth evaluated in isolation.
pub fn per_camera(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> Result<BTreeMap<u32, EvalReport>> {
    cameras(gt)
        .into_iter()
        .map(|c| {
            Ok((
                c,
                evaluate(&restrict_to_camera(pred, c), &restrict_to_camera(gt, c), threshold)?,
            ))
        })
        .collect()
}
