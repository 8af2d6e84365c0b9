//! Trajectory-based camera link model: zone-pair assignment of trajectories,
//! link and transition-window learning from labelled training tracks, and the
//! transition and order checks used to prune cross-camera candidates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::sct::Trajectory;
use crate::zones::Zone;

/// An ordered (entry zone, exit zone) combination within one camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZonePair {
    pub camera_id: u32,
    pub pair_id: u32,
    pub entry_zone_id: u32,
    pub exit_zone_id: u32,
}

impl ZonePair {
    pub fn contains(&self, zone_id: u32) -> bool {
        self.entry_zone_id == zone_id || self.exit_zone_id == zone_id
    }
}

/// Every ordered pair of distinct zones whose classes allow the first to
/// start a trajectory and the second to end it. Pair IDs follow
/// (entry zone, exit zone) order.
pub fn enumerate_zone_pairs(zones: &[Zone]) -> Vec<ZonePair> {
    let mut sorted: Vec<&Zone> = zones.iter().collect();
    sorted.sort_by_key(|z| (z.camera_id, z.zone_id));
    let mut pairs = Vec::new();
    let mut next_id: BTreeMap<u32, u32> = BTreeMap::new();
    for a in &sorted {
        for b in &sorted {
            if a.camera_id != b.camera_id || a.zone_id == b.zone_id {
                continue;
            }
            if a.class.can_start_pair() && b.class.can_end_pair() {
                let id = next_id.entry(a.camera_id).or_insert(0);
                pairs.push(ZonePair {
                    camera_id: a.camera_id,
                    pair_id: *id,
                    entry_zone_id: a.zone_id,
                    exit_zone_id: b.zone_id,
                });
                *id += 1;
            }
        }
    }
    pairs
}

/// A zone a trajectory passed through, with its overlap ratio α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneVisit {
    pub zone_id: u32,
    pub alpha: f64,
    pub first_frame: i64,
    pub last_frame: i64,
}

/// Zones touched by the trajectory, ordered by first visit. α is the largest
/// fraction of any of its boxes lying inside the zone.
pub fn zone_visits(trajectory: &Trajectory, zones: &[Zone]) -> Vec<ZoneVisit> {
    let mut visits: Vec<ZoneVisit> = Vec::new();
    for z in zones.iter().filter(|z| z.camera_id == trajectory.camera_id) {
        let mut visit: Option<ZoneVisit> = None;
        for d in &trajectory.detections {
            let r = d.bbox.overlap_ratio(&z.bbox);
            if r <= 0.0 {
                continue;
            }
            let v = visit.get_or_insert(ZoneVisit {
                zone_id: z.zone_id,
                alpha: 0.0,
                first_frame: d.frame,
                last_frame: d.frame,
            });
            v.alpha = v.alpha.max(r);
            v.last_frame = d.frame;
        }
        visits.extend(visit);
    }
    visits.sort_by_key(|v| (v.first_frame, v.zone_id));
    visits
}

/// `Σ_{z ∈ P ∪ V} |1(z ∈ P) − α_z|`, or infinity when the trajectory reaches
/// the pair's exit zone before its entry zone.
pub fn zone_pair_distance(pair: &ZonePair, visits: &[ZoneVisit]) -> Result<f64> {
    if let Some(v) = visits.iter().find(|v| !(0.0..=1.0).contains(&v.alpha)) {
        return Err(Error::validation(format!(
            "overlap ratio {} for zone {} outside [0,1]",
            v.alpha, v.zone_id
        )));
    }
    let pos = |zone: u32| visits.iter().position(|v| v.zone_id == zone);
    if let (Some(e), Some(x)) = (pos(pair.entry_zone_id), pos(pair.exit_zone_id)) {
        if x < e {
            return Ok(f64::INFINITY);
        }
    }
    let alpha = |zone: u32| visits.iter().find(|v| v.zone_id == zone).map_or(0.0, |v| v.alpha);
    let mut d = (1.0 - alpha(pair.entry_zone_id)).abs() + (1.0 - alpha(pair.exit_zone_id)).abs();
    for v in visits.iter().filter(|v| !pair.contains(v.zone_id)) {
        d += v.alpha;
    }
    Ok(d)
}

/// The closest zone pair of the trajectory's camera, if its distance is
/// finite and within `max_pair_distance`. Ties go to the lower pair ID.
pub fn assign_zone_pair(
    trajectory: &Trajectory,
    zone_pairs: &[ZonePair],
    zones: &[Zone],
    config: &PipelineConfig,
) -> Result<Option<u32>> {
    let visits = zone_visits(trajectory, zones);
    let mut best: Option<(f64, u32)> = None;
    for p in zone_pairs.iter().filter(|p| p.camera_id == trajectory.camera_id) {
        let d = zone_pair_distance(p, &visits)?;
        if !d.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && p.pair_id < bid),
        };
        if better {
            best = Some((d, p.pair_id));
        }
    }
    Ok(best.filter(|(d, _)| *d <= config.max_pair_distance).map(|(_, id)| id))
}

/// Last frame in which the trajectory overlaps `zone`, falling back to its
/// final frame.
pub fn exit_crossing(trajectory: &Trajectory, zone: Option<&Zone>) -> i64 {
    zone.and_then(|z| {
        trajectory
            .detections
            .iter()
            .rev()
            .find(|d| d.bbox.overlap_ratio(&z.bbox) > 0.0)
            .map(|d| d.frame)
    })
    .unwrap_or_else(|| trajectory.end_frame())
}

/// First frame in which the trajectory overlaps `zone`, falling back to its
/// first frame.
pub fn entry_crossing(trajectory: &Trajectory, zone: Option<&Zone>) -> i64 {
    zone.and_then(|z| {
        trajectory
            .detections
            .iter()
            .find(|d| d.bbox.overlap_ratio(&z.bbox) > 0.0)
            .map(|d| d.frame)
    })
    .unwrap_or_else(|| trajectory.start_frame())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkEnd {
    pub camera_id: u32,
    pub pair_id: u32,
    /// Transition zone: exit zone of a source pair, entry zone of a destination pair.
    pub zone_id: u32,
}

/// A learned transition between a source zone pair and a destination zone
/// pair, with its window on `Δt = t_dst − t_src` in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraLink {
    pub source: LinkEnd,
    pub destination: LinkEnd,
    pub dt_min: f64,
    pub dt_max: f64,
    pub sample_count: usize,
}

impl CameraLink {
    pub fn contains(&self, dt: f64) -> bool {
        dt >= self.dt_min && dt <= self.dt_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraZones {
    pub camera_id: u32,
    pub zones: Vec<Zone>,
    pub zone_pairs: Vec<ZonePair>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraLinkModel {
    pub cameras: Vec<CameraZones>,
    pub links: Vec<CameraLink>,
}

/// A trajectory pair that falls on a learned link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub link_index: usize,
    /// Frame the source trajectory leaves its transition zone.
    pub t_src: i64,
    /// Frame the destination trajectory reaches its transition zone.
    pub t_dst: i64,
}

impl Transition {
    pub fn dt(&self) -> f64 {
        (self.t_dst - self.t_src) as f64
    }
}

impl CameraLinkModel {
    pub fn camera(&self, camera_id: u32) -> Option<&CameraZones> {
        self.cameras.iter().find(|c| c.camera_id == camera_id)
    }

    pub fn zone(&self, camera_id: u32, zone_id: u32) -> Option<&Zone> {
        self.camera(camera_id)?.zones.iter().find(|z| z.zone_id == zone_id)
    }

    pub fn pair(&self, camera_id: u32, pair_id: u32) -> Option<&ZonePair> {
        self.camera(camera_id)?.zone_pairs.iter().find(|p| p.pair_id == pair_id)
    }

    /// Assigns a zone pair using this model's zones for the trajectory's camera.
    pub fn assign(&self, trajectory: &Trajectory, config: &PipelineConfig) -> Result<Option<u32>> {
        match self.camera(trajectory.camera_id) {
            Some(c) => assign_zone_pair(trajectory, &c.zone_pairs, &c.zones, config),
            None => Ok(None),
        }
    }

    pub fn find_link(&self, src: (u32, u32), dst: (u32, u32)) -> Option<usize> {
        self.links.iter().position(|l| {
            (l.source.camera_id, l.source.pair_id) == src && (l.destination.camera_id, l.destination.pair_id) == dst
        })
    }

    /// The link `src → dst` falls on, with crossing times, regardless of
    /// the window.
    pub fn transition(&self, src: &Trajectory, dst: &Trajectory) -> Option<Transition> {
        let sp = src.zone_pair?;
        let dp = dst.zone_pair?;
        let link_index = self.find_link((src.camera_id, sp), (dst.camera_id, dp))?;
        let link = &self.links[link_index];
        let t_src = exit_crossing(src, self.zone(link.source.camera_id, link.source.zone_id));
        let t_dst = entry_crossing(dst, self.zone(link.destination.camera_id, link.destination.zone_id));
        Some(Transition {
            link_index,
            t_src,
            t_dst,
        })
    }

    /// A transition on a learned link whose Δt lies inside the link's window.
    pub fn valid_transition(&self, src: &Trajectory, dst: &Trajectory) -> Option<Transition> {
        self.transition(src, dst)
            .filter(|t| self.links[t.link_index].contains(t.dt()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        for l in &m.links {
            if l.dt_min > l.dt_max {
                return Err(Error::validation(format!(
                    "link {:?} -> {:?} has dt_min > dt_max",
                    l.source, l.destination
                )));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Linear-interpolated percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// One labelled training trajectory (its `zone_pair` should be assigned).
#[derive(Debug, Clone)]
pub struct TrainingTrajectory {
    pub global_id: u64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LearnStats {
    /// Training trajectories without a zone pair.
    pub skipped_unassigned: usize,
    /// Transition samples collected before the sample-count threshold.
    pub samples: usize,
    /// Candidate links dropped for having too few samples.
    pub dropped_links: usize,
}

/// Learns links and transition windows: every vehicle seen in camera `s`
/// and next in camera `d` contributes `Δt = t_entry(d) − t_exit(s)` to the
/// link between its two zone pairs.
pub fn learn_links(
    training: &[TrainingTrajectory],
    cameras: Vec<CameraZones>,
    config: &PipelineConfig,
) -> (CameraLinkModel, LearnStats) {
    let mut model = CameraLinkModel {
        cameras,
        links: Vec::new(),
    };
    let mut stats = LearnStats {
        skipped_unassigned: training.iter().filter(|t| t.trajectory.zone_pair.is_none()).count(),
        ..LearnStats::default()
    };

    let mut by_vehicle: BTreeMap<u64, Vec<&Trajectory>> = BTreeMap::new();
    for t in training {
        by_vehicle.entry(t.global_id).or_default().push(&t.trajectory);
    }
    let mut samples: BTreeMap<(LinkEnd, LinkEnd), Vec<f64>> = BTreeMap::new();
    for seq in by_vehicle.values_mut() {
        seq.sort_by_key(|t| (t.start_frame(), t.camera_id));
        for w in seq.windows(2) {
            let (s, d) = (w[0], w[1]);
            if s.camera_id == d.camera_id {
                continue;
            }
            let (Some(sp), Some(dp)) = (s.zone_pair, d.zone_pair) else {
                continue;
            };
            let (Some(src_pair), Some(dst_pair)) = (model.pair(s.camera_id, sp), model.pair(d.camera_id, dp)) else {
                continue;
            };
            let src = LinkEnd {
                camera_id: s.camera_id,
                pair_id: sp,
                zone_id: src_pair.exit_zone_id,
            };
            let dst = LinkEnd {
                camera_id: d.camera_id,
                pair_id: dp,
                zone_id: dst_pair.entry_zone_id,
            };
            let t_src = exit_crossing(s, model.zone(src.camera_id, src.zone_id));
            let t_dst = entry_crossing(d, model.zone(dst.camera_id, dst.zone_id));
            samples.entry((src, dst)).or_default().push((t_dst - t_src) as f64);
            stats.samples += 1;
        }
    }

    for ((source, destination), mut dts) in samples {
        if dts.len() < config.min_link_samples {
            stats.dropped_links += 1;
            continue;
        }
        dts.sort_by(f64::total_cmp);
        model.links.push(CameraLink {
            source,
            destination,
            dt_min: percentile(&dts, config.window_percentile_low) - config.window_padding,
            dt_max: percentile(&dts, config.window_percentile_high) + config.window_padding,
            sample_count: dts.len(),
        });
    }
    (model, stats)
}

/// Crossing times of one matched (source, destination) trajectory pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchTimes {
    pub t_src: i64,
    pub t_dst: i64,
}

/// Vehicles keep their order along a link: `sign(a.src − b.src) == sign(a.dst − b.dst)`.
pub fn order_consistent(a: MatchTimes, b: MatchTimes) -> bool {
    (a.t_src - b.t_src).signum() == (a.t_dst - b.t_dst).signum()
}

/// [`order_consistent`] on trajectory pairs, using crossing frames of the
/// model's transition zones. Pairs not on a common link are unconstrained.
pub fn order_consistent_trajectories(
    model: &CameraLinkModel,
    a: (&Trajectory, &Trajectory),
    b: (&Trajectory, &Trajectory),
) -> bool {
    match (model.transition(a.0, a.1), model.transition(b.0, b.1)) {
        (Some(ta), Some(tb)) if ta.link_index == tb.link_index => order_consistent(
            MatchTimes {
                t_src: ta.t_src,
                t_dst: ta.t_dst,
            },
            MatchTimes {
                t_src: tb.t_src,
                t_dst: tb.t_dst,
            },
        ),
        _ => true,
    }
}
