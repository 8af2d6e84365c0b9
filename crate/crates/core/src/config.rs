//! Pipeline configuration, loaded from a flat JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every tunable of the pipeline. Missing JSON keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// MeanShift kernel bandwidth and neighborhood radius, pixels.
    pub bandwidth: f64,
    pub rho_entry: f64,
    pub rho_exit: f64,
    pub rho_traffic_aware: f64,
    /// Clusters with fewer endpoints than this do not become zones.
    pub min_zone_points: usize,
    /// Zones are grown until their area is at least this multiple of the mean
    /// vehicle box area of their members.
    pub zone_min_area_ratio: f64,
    /// Fraction of a box that must lie inside a zone for the box to count as
    /// being in that zone.
    pub zone_membership_overlap: f64,

    pub iou_assoc_threshold: f64,
    /// Frames a tracklet may go unmatched before it is closed.
    pub gap_frames: u32,
    /// Largest frame gap tracklet clustering will bridge.
    pub gap_max: u32,
    pub edge_weight_appearance: f64,
    pub edge_weight_temporal: f64,
    pub edge_weight_motion: f64,
    pub tracklet_merge_threshold: f64,

    pub iou_reconnect_threshold: f64,
    pub appearance_reconnect_threshold: f64,
    pub reconnect_ttl_frames: u32,

    pub max_pair_distance: f64,
    pub min_link_samples: usize,
    pub window_percentile_low: f64,
    pub window_percentile_high: f64,
    pub window_padding: f64,

    pub clip_size: usize,
    pub metadata_weight: f64,

    pub cluster_distance_threshold: f64,
    pub cluster_iterations: usize,

    pub eval_iou_threshold: f64,

    /// Added to each camera's local frame index to obtain the global clock.
    pub frame_offsets: BTreeMap<u32, i64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bandwidth: 250.0,
            rho_entry: 0.8,
            rho_exit: 0.8,
            rho_traffic_aware: 0.8,
            min_zone_points: 5,
            zone_min_area_ratio: 1.5,
            zone_membership_overlap: 0.5,
            iou_assoc_threshold: 0.3,
            gap_frames: 2,
            gap_max: 64,
            edge_weight_appearance: 0.5,
            edge_weight_temporal: 0.25,
            edge_weight_motion: 0.25,
            tracklet_merge_threshold: 0.3,
            iou_reconnect_threshold: 0.05,
            appearance_reconnect_threshold: 0.4,
            reconnect_ttl_frames: 1800,
            max_pair_distance: 1.5,
            min_link_samples: 3,
            window_percentile_low: 0.0,
            window_percentile_high: 100.0,
            window_padding: 10.0,
            clip_size: 4,
            metadata_weight: 1.0,
            cluster_distance_threshold: 0.6,
            cluster_iterations: 2,
            eval_iou_threshold: 0.5,
            frame_offsets: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn frame_offset(&self, camera_id: u32) -> i64 {
        self.frame_offsets.get(&camera_id).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("rho_entry", self.rho_entry),
            ("rho_exit", self.rho_exit),
            ("rho_traffic_aware", self.rho_traffic_aware),
            ("zone_membership_overlap", self.zone_membership_overlap),
            ("iou_assoc_threshold", self.iou_assoc_threshold),
            ("iou_reconnect_threshold", self.iou_reconnect_threshold),
            ("appearance_reconnect_threshold", self.appearance_reconnect_threshold),
            ("eval_iou_threshold", self.eval_iou_threshold),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        let positive = [
            ("bandwidth", self.bandwidth),
            ("cluster_distance_threshold", self.cluster_distance_threshold),
            ("zone_min_area_ratio", self.zone_min_area_ratio),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("edge_weight_appearance", self.edge_weight_appearance),
            ("edge_weight_temporal", self.edge_weight_temporal),
            ("edge_weight_motion", self.edge_weight_motion),
            ("tracklet_merge_threshold", self.tracklet_merge_threshold),
            ("max_pair_distance", self.max_pair_distance),
            ("window_padding", self.window_padding),
            ("metadata_weight", self.metadata_weight),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let (lo, hi) = (self.window_percentile_low, self.window_percentile_high);
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(Error::validation(format!(
                "window percentiles must satisfy 0 <= low <= high <= 100, got ({lo}, {hi})"
            )));
        }
        if self.gap_max == 0 {
            return Err(Error::validation("gap_max must be at least 1"));
        }
        if self.clip_size == 0 {
            return Err(Error::validation("clip_size must be at least 1"));
        }
        if self.cluster_iterations == 0 {
            return Err(Error::validation("cluster_iterations must be at least 1"));
        }
        if self.min_zone_points == 0 {
            return Err(Error::validation("min_zone_points must be at least 1"));
        }
        Ok(())
    }
}
