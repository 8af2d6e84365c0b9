//! Trajectory-level appearance and metadata features, their concatenation,
//! and vehicle orientation binning from wheel keypoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::l2_normalize;
use crate::ingest::WheelKeypoints;

/// Narrow orientation regions are `[c - NARROW_HALF_WIDTH, c + NARROW_HALF_WIDTH)`.
pub const NARROW_HALF_WIDTH: f64 = 10.0;
/// Wide orientation regions span this many degrees.
pub const WIDE_WIDTH: f64 = 70.0;

/// Appearance feature concatenated with scaled metadata distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub appearance: Vec<f64>,
    pub metadata: Vec<f64>,
    pub full: Vec<f64>,
}

impl FusedFeature {
    pub fn dim(&self) -> usize {
        self.full.len()
    }
}

/// Clip-pooled trajectory appearance.
///
/// Frames are split into consecutive clips of `clip_size`; each clip is the
/// weight-normalized mean of its frames (uniform when `weights` is `None`),
/// the trajectory feature is the plain mean of the clip features, and the
/// result is L2-normalized.
pub fn trajectory_appearance(frames: &[&[f64]], weights: Option<&[f64]>, clip_size: usize) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::validation("trajectory appearance needs at least one frame"));
    }
    if clip_size == 0 {
        return Err(Error::validation("clip size must be at least 1"));
    }
    let dim = frames[0].len();
    if let Some(f) = frames.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            found: f.len(),
            context: "frame embeddings of one trajectory".into(),
        });
    }
    if let Some(w) = weights {
        if w.len() != frames.len() {
            return Err(Error::validation(format!(
                "{} attention weights for {} frames",
                w.len(),
                frames.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::validation(
                "attention weights must be nonnegative and not all zero",
            ));
        }
    }

    let mut pooled = vec![0.0; dim];
    let mut clips = 0usize;
    for (c, chunk) in frames.chunks(clip_size).enumerate() {
        let start = c * clip_size;
        let w: Vec<f64> = match weights {
            Some(w) => w[start..start + chunk.len()].to_vec(),
            None => vec![1.0; chunk.len()],
        };
        let total: f64 = w.iter().sum();
        // a clip whose weights are all zero carries no evidence
        if total == 0.0 {
            continue;
        }
        for (f, wk) in chunk.iter().zip(&w) {
            for (p, x) in pooled.iter_mut().zip(f.iter()) {
                *p += wk / total * x;
            }
        }
        clips += 1;
    }
    pooled.iter_mut().for_each(|p| *p /= clips as f64);
    if l2_normalize(&mut pooled) == 0.0 {
        return Err(Error::Degenerate("pooled appearance feature has zero norm".into()));
    }
    Ok(pooled)
}

/// Element-wise mean of per-frame class distributions.
pub fn metadata_feature(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::validation("metadata feature needs at least one frame"))?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for r in rows {
        if r.len() != k {
            return Err(Error::validation(format!(
                "inconsistent class counts: {} and {}",
                k,
                r.len()
            )));
        }
        for (m, p) in mean.iter_mut().zip(r.iter()) {
            *m += p;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `A ⊕ λ·M_1 ⊕ λ·M_2 ⊕ ...`
pub fn fuse(appearance: &[f64], metadata: &[&[f64]], weight: f64) -> FusedFeature {
    let meta: Vec<f64> = metadata.iter().flat_map(|m| m.iter().map(|p| p * weight)).collect();
    let mut full = appearance.to_vec();
    full.extend_from_slice(&meta);
    FusedFeature {
        appearance: appearance.to_vec(),
        metadata: meta,
        full,
    }
}

/// Euclidean distance between two fused feature vectors.
pub fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
            context: "fused features".into(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Driving direction in degrees, counterclockwise from the +x axis, in
/// `[0, 360)`. Points are taken in a math (y-up) frame; callers with image
/// coordinates should flip y first.
pub fn direction_angle(w: &WheelKeypoints) -> Result<f64> {
    let pts = [w.front_left, w.front_right, w.back_left, w.back_right];
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::validation("non-finite wheel keypoint"));
    }
    let front = (
        (w.front_left.0 + w.front_right.0) / 2.0,
        (w.front_left.1 + w.front_right.1) / 2.0,
    );
    let back = (
        (w.back_left.0 + w.back_right.0) / 2.0,
        (w.back_left.1 + w.back_right.1) / 2.0,
    );
    let (dx, dy) = (front.0 - back.0, front.1 - back.1);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::Degenerate("front and back axle centers coincide".into()));
    }
    let deg = dy.atan2(dx).to_degrees().rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative angles
    Ok(if deg >= 360.0 { 0.0 } else { deg })
}

/// One of the 8 orientation regions: even indices are the narrow regions
/// centered on 0°, 90°, 180°, 270°; odd indices are the wide regions starting
/// at 10°, 100°, 190°, 280°.
pub fn direction_bin(theta: f64) -> u8 {
    let t = theta.rem_euclid(360.0);
    for q in 0..4u8 {
        let center = 90.0 * q as f64;
        let lo = center - NARROW_HALF_WIDTH;
        let hi = center + NARROW_HALF_WIDTH;
        let in_narrow = if lo < 0.0 {
            t >= lo + 360.0 || t < hi
        } else {
            t >= lo && t < hi
        };
        if in_narrow {
            return 2 * q;
        }
        let wide_lo = center + NARROW_HALF_WIDTH;
        if t >= wide_lo && t < wide_lo + WIDE_WIDTH {
            return 2 * q + 1;
        }
    }
    unreachable!("orientation regions tile [0, 360)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn single_frame_is_normalized() {
        let v = [3.0, 4.0];
        let a = trajectory_appearance(&[&v], None, 4).unwrap();
        assert!((a[0] - 0.6).abs() < 1e-12 && (a[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_frames_any_weights() {
        let v = [1.0, 2.0, 2.0];
        let frames = [&v[..]; 4];
        let a = trajectory_appearance(&frames, Some(&[0.1, 3.0, 0.0, 1.0]), 4).unwrap();
        let b = trajectory_appearance(&[&v], None, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn two_clips_average() {
        let u = [1.0, 0.0, 0.0];
        let w = [0.0, 2.0, 0.0];
        let frames = [&u[..], &u, &u, &u, &w, &w, &w, &w];
        let a = trajectory_appearance(&frames, None, 4).unwrap();
        // normalize((u + w) / 2) = normalize(0.5, 1, 0)
        let n = (0.25f64 + 1.0).sqrt();
        assert!((a[0] - 0.5 / n).abs() < 1e-12);
        assert!((a[1] - 1.0 / n).abs() < 1e-12);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_pooling_differs_from_frame_mean() {
        // 5 frames, c = 4: clip means u and w get equal say despite 4:1 frames
        let u = [1.0, 0.0];
        let w = [0.0, 1.0];
        let a = trajectory_appearance(&[&u, &u, &u, &u, &w], None, 4).unwrap();
        assert!((a[0] - a[1]).abs() < 1e-12);
    }

    #[test]
    fn appearance_errors() {
        assert!(trajectory_appearance(&[], None, 4).is_err());
        let v = [1.0, 0.0];
        assert!(trajectory_appearance(&[&v, &v], Some(&[1.0]), 4).is_err());
        assert!(trajectory_appearance(&[&v], Some(&[0.0]), 4).is_err());
        assert!(trajectory_appearance(&[&v], Some(&[-1.0]), 4).is_err());
    }

    #[test]
    fn metadata_means() {
        assert_eq!(metadata_feature(&[&[0.3, 0.7]]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(metadata_feature(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        let m = metadata_feature(&[&[0.6, 0.4], &[0.8, 0.2], &[0.7, 0.3]]).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-12 && (m[1] - 0.3).abs() < 1e-12);
        assert!(metadata_feature(&[&[0.5, 0.5], &[1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn fused_dimensions_and_weighting() {
        let a = [0.5, 0.5, 0.5, 0.5];
        let f = fuse(&a, &[&[0.5, 0.5], &[0.2, 0.3, 0.5], &[1.0, 0.0]], 1.0);
        assert_eq!(f.dim(), 11);
        let g = fuse(&a, &[&[0.5, 0.5]], 0.0);
        let h = fuse(&a, &[&[1.0, 0.0]], 0.0);
        assert_eq!(pair_distance(&g.full, &h.full).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_one_hot_type() {
        let a = [1.0, 0.0];
        let f1 = fuse(&a, &[&[1.0, 0.0, 0.0]], 1.0);
        let f2 = fuse(&a, &[&[0.0, 1.0, 0.0]], 1.0);
        assert!((pair_distance(&f1.full, &f2.full).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pair_distance_cases() {
        let f = [0.3, 0.4, 0.5];
        assert_eq!(pair_distance(&f, &f).unwrap(), 0.0);
        assert!((pair_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let a = fuse(&[1.0, 0.0], &[&[0.6, 0.4]], 1.0);
        let b = fuse(&[1.0, 0.0], &[&[0.4, 0.6]], 1.0);
        assert!((pair_distance(&a.full, &b.full).unwrap() - 0.08f64.sqrt()).abs() < 1e-12);
        assert!((pair_distance(&a.full, &b.full).unwrap() - 0.2828).abs() < 1e-4);
        assert!(pair_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn wheels_toward(dx: f64, dy: f64) -> WheelKeypoints {
        WheelKeypoints {
            front_left: (dx - dy * 0.1, dy + dx * 0.1),
            front_right: (dx + dy * 0.1, dy - dx * 0.1),
            back_left: (-dy * 0.1, dx * 0.1),
            back_right: (dy * 0.1, -dx * 0.1),
        }
    }

    #[test]
    fn direction_angles() {
        assert!((direction_angle(&wheels_toward(1.0, 0.0)).unwrap() - 0.0).abs() < 1e-9);
        assert!((direction_angle(&wheels_toward(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-9);
        assert!((direction_angle(&wheels_toward(-1.0, -1.0)).unwrap() - 225.0).abs() < 1e-9);
        let degenerate = WheelKeypoints {
            front_left: (0.0, 1.0),
            front_right: (0.0, -1.0),
            back_left: (0.0, -1.0),
            back_right: (0.0, 1.0),
        };
        assert!(matches!(direction_angle(&degenerate), Err(Error::Degenerate(_))));
    }

    #[test]
    fn direction_bins() {
        assert_eq!(direction_bin(0.0), 0);
        assert_eq!(direction_bin(45.0), 1);
        assert_eq!(direction_bin(355.0), 0);
        assert_eq!(direction_bin(350.0), 0);
        assert_eq!(direction_bin(10.0), 1);
        assert_eq!(direction_bin(79.999), 1);
        assert_eq!(direction_bin(80.0), 2);
        assert_eq!(direction_bin(100.0), 3);
        assert_eq!(direction_bin(180.0), 4);
        assert_eq!(direction_bin(200.0), 5);
        assert_eq!(direction_bin(270.0), 6);
        assert_eq!(direction_bin(349.9), 7);
    }

    proptest! {
        #[test]
        fn metadata_permutation_invariant(rows in proptest::collection::vec(0.0..1.0f64, 1..12), rot in 0usize..12) {
            let dists: Vec<[f64; 2]> = rows.iter().map(|&p| [p, 1.0 - p]).collect();
            let refs: Vec<&[f64]> = dists.iter().map(|r| &r[..]).collect();
            let mut rotated = refs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let a = metadata_feature(&refs).unwrap();
            let b = metadata_feature(&rotated).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-12);
            prop_assert!((a[0] + a[1] - 1.0).abs() < 1e-9);
        }

        #[test]
        fn metadata_weight_is_monotone(p in 0.0..1.0f64, q in 0.0..1.0f64, l1 in 0.0..3.0f64, dl in 0.0..3.0f64) {
            let a = [0.6, 0.8];
            let d = |l: f64| {
                let f = fuse(&a, &[&[p, 1.0 - p]], l);
                let g = fuse(&a, &[&[q, 1.0 - q]], l);
                pair_distance(&f.full, &g.full).unwrap()
            };
            prop_assert!(d(l1 + dl) >= d(l1) - 1e-12);
        }
    }
}
