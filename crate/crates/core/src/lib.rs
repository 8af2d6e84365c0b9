//! Multi-camera vehicle tracking.
//!
//! Detections from each camera are linked into trajectories, entry/exit
//! zones are inferred from where trajectories start and end, and vehicles
//! that vanish inside a traffic-aware zone are rejoined. Trajectories from
//! different cameras are then clustered into global identities, optionally
//! restricted to transitions a learned camera link model allows.
//!
//! The [`pipeline`] module wires the stages together; [`synth`] generates
//! scenarios with ground truth and [`eval`] scores results.

pub mod clm;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod mtmct;
pub mod pipeline;
pub mod sct;
pub mod synth;
pub mod zones;

pub use clm::{CameraLink, CameraLinkModel, ZonePair};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use eval::{EvalReport, IdentityScores, MotScores};
pub use fusion::FusedFeature;
pub use geometry::BBox;
pub use ingest::{Detection, TrackRow, TrackSet};
pub use mtmct::{DistanceMatrix, GlobalAssignment};
pub use pipeline::{CameraInput, RunOutput, RunReport};
pub use sct::{Tracklet, Trajectory};
pub use synth::{Scenario, ScenarioSpec};
pub use zones::{Zone, ZoneClass};
