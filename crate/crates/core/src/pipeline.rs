//! End-to-end orchestration: per-camera tracking, zones, reconnection and
//! feature fusion, then cross-camera clustering into global identities.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::clm::{
    assign_zone_pair, enumerate_zone_pairs, learn_links, CameraLinkModel, CameraZones, LearnStats, TrainingTrajectory,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{direction_angle, direction_bin, fuse, metadata_feature, trajectory_appearance};
use crate::geometry::iou;
use crate::ingest::{
    parse_detections, parse_embeddings, parse_keypoints, parse_metadata, parse_track_rows_str, write_text,
    write_track_rows, DetKey, Detection, EmbeddingTable, MetadataTable, TrackRow, TrackSet, WheelKeypoints,
};
use crate::mtmct::{build_distance_matrix, hierarchical_cluster, GlobalAssignment};
use crate::sct::{track_camera, Trajectory};
use crate::synth::CameraData;
use crate::zones::{build_zones, reconnect_isolated, write_zones, MergeRecord, Zone};

/// Everything read for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraInput {
    pub camera_id: u32,
    pub detections: Vec<Detection>,
    pub embeddings: EmbeddingTable,
    /// Sorted by attribute name.
    pub metadata: Vec<MetadataTable>,
    pub keypoints: Option<BTreeMap<DetKey, WheelKeypoints>>,
}

impl From<CameraData> for CameraInput {
    fn from(c: CameraData) -> Self {
        CameraInput {
            camera_id: c.camera_id,
            detections: c.detections,
            embeddings: c.embeddings,
            metadata: c.metadata,
            keypoints: Some(c.keypoints),
        }
    }
}

fn camera_dirs(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("cam_").and_then(|s| s.parse::<u32>().ok()) {
            if entry.path().is_dir() {
                out.push((id, entry.path()));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::validation(format!(
            "no cam_<id> directories in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn shift_key(k: DetKey, offset: i64) -> DetKey {
    DetKey {
        frame: k.frame + offset,
        ..k
    }
}

/// Reads one camera directory (`det.csv`, `emb.csv`, optional `meta_*.csv`
/// and `keypoints.csv`) and moves its frames onto the shared timeline.
pub fn load_camera(camera_id: u32, dir: &Path, config: &PipelineConfig) -> Result<CameraInput> {
    let mut detections = parse_detections(&dir.join("det.csv"), camera_id)?;
    let mut embeddings = parse_embeddings(&dir.join("emb.csv"), camera_id, &detections)?;
    let mut meta_paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("meta_") && n.ends_with(".csv"))
        })
        .collect();
    meta_paths.sort();
    let mut metadata = meta_paths
        .iter()
        .map(|p| parse_metadata(p, camera_id, &detections))
        .collect::<Result<Vec<_>>>()?;
    metadata.sort_by(|a, b| a.attribute.cmp(&b.attribute));
    let kp_path = dir.join("keypoints.csv");
    let mut keypoints = if kp_path.exists() {
        Some(parse_keypoints(&kp_path)?)
    } else {
        None
    };

    let offset = config.frame_offset(camera_id);
    if offset != 0 {
        for d in &mut detections {
            d.frame += offset;
        }
        embeddings.rows = std::mem::take(&mut embeddings.rows)
            .into_iter()
            .map(|(k, v)| (shift_key(k, offset), v))
            .collect();
        for m in &mut metadata {
            m.rows = std::mem::take(&mut m.rows)
                .into_iter()
                .map(|(k, v)| (shift_key(k, offset), v))
                .collect();
        }
        if let Some(kp) = &mut keypoints {
            *kp = std::mem::take(kp)
                .into_iter()
                .map(|(k, v)| (shift_key(k, offset), v))
                .collect();
        }
    }
    Ok(CameraInput {
        camera_id,
        detections,
        embeddings,
        metadata,
        keypoints,
    })
}

/// Loads every `cam_<id>` directory under `dir`, ordered by camera ID.
pub fn load_inputs(dir: &Path, config: &PipelineConfig) -> Result<Vec<CameraInput>> {
    camera_dirs(dir)?
        .into_iter()
        .map(|(id, path)| load_camera(id, &path, config))
        .collect()
}

/// Rebuilds SCT trajectories from a track file by matching each row to the
/// camera detection it was written from.
pub fn trajectories_from_rows(
    input: &CameraInput,
    rows: &[TrackRow],
    config: &PipelineConfig,
) -> Result<Vec<Trajectory>> {
    let offset = config.frame_offset(input.camera_id);
    let mut by_frame: BTreeMap<i64, Vec<&Detection>> = BTreeMap::new();
    for d in &input.detections {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let mut groups: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.camera_id == input.camera_id) {
        let frame = r.frame + offset;
        let best = by_frame
            .get(&frame)
            .into_iter()
            .flatten()
            .map(|d| (iou(&d.bbox, &r.bbox), *d))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.det_index.cmp(&a.1.det_index)));
        match best {
            Some((v, d)) if v >= 0.99 => groups.entry(r.id).or_default().push(*d),
            _ => {
                return Err(Error::validation(format!(
                    "track row camera {} frame {} id {} matches no detection",
                    r.camera_id, r.frame, r.id
                )))
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(id, dets)| Trajectory::new(input.camera_id, id, dets))
        .collect())
}

pub fn parse_sct_file(path: &Path) -> Result<Vec<TrackRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_track_rows_str(&text, path)
}

/// Track rows for trajectories, frames moved back to the camera's own clock.
pub fn trajectory_rows(trajectories: &[Trajectory], config: &PipelineConfig) -> Vec<TrackRow> {
    trajectories
        .iter()
        .flat_map(|t| {
            let offset = config.frame_offset(t.camera_id);
            t.detections.iter().map(move |d| TrackRow {
                camera_id: t.camera_id,
                frame: d.frame - offset,
                id: t.local_id,
                bbox: d.bbox,
            })
        })
        .collect()
}

/// Appearance and metadata feature of one trajectory.
pub fn fuse_trajectory(
    t: &Trajectory,
    input: &CameraInput,
    config: &PipelineConfig,
) -> Result<crate::fusion::FusedFeature> {
    let frames: Vec<&[f64]> = t
        .detections
        .iter()
        .map(|d| {
            input
                .embeddings
                .get(&d.key())
                .ok_or_else(|| Error::Coverage(format!("no embedding for detection {}", d.key())))
        })
        .collect::<Result<_>>()?;
    let appearance = trajectory_appearance(&frames, None, config.clip_size)?;
    let mut blocks = Vec::with_capacity(input.metadata.len());
    for table in &input.metadata {
        let rows: Vec<&[f64]> = t
            .detections
            .iter()
            .map(|d| {
                table
                    .get(&d.key())
                    .ok_or_else(|| Error::Coverage(format!("no {} row for detection {}", table.attribute, d.key())))
            })
            .collect::<Result<_>>()?;
        blocks.push(metadata_feature(&rows)?);
    }
    let refs: Vec<&[f64]> = blocks.iter().map(Vec::as_slice).collect();
    Ok(fuse(&appearance, &refs, config.metadata_weight))
}

/// Most frequent driving-direction bin over the trajectory's keypoints.
/// Keypoints are in image coordinates, so y is flipped first.
pub fn dominant_direction(t: &Trajectory, keypoints: &BTreeMap<DetKey, WheelKeypoints>) -> Option<u8> {
    let mut counts = [0usize; 8];
    for d in &t.detections {
        let Some(kp) = keypoints.get(&d.key()) else { continue };
        let flip = |(x, y): (f64, f64)| (x, -y);
        let w = WheelKeypoints {
            front_left: flip(kp.front_left),
            front_right: flip(kp.front_right),
            back_left: flip(kp.back_left),
            back_right: flip(kp.back_right),
        };
        if let Ok(theta) = direction_angle(&w) {
            counts[direction_bin(theta) as usize] += 1;
        }
    }
    let (bin, n) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (*n > 0).then_some(bin as u8)
}

/// Result of the per-camera stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraStage {
    pub camera_id: u32,
    /// Trajectories straight out of single-camera tracking.
    pub sct: Vec<Trajectory>,
    pub zones: Vec<Zone>,
    pub merges: Vec<MergeRecord>,
    /// Reconnected trajectories with fused features and zone pairs.
    pub trajectories: Vec<Trajectory>,
    pub directions: [usize; 8],
}

/// SCT (unless `sct` is given), zones, reconnection, fusion and zone-pair
/// assignment for one camera.
pub fn run_camera(
    input: &CameraInput,
    sct: Option<Vec<Trajectory>>,
    config: &PipelineConfig,
    model: Option<&CameraLinkModel>,
) -> Result<CameraStage> {
    let sct = match sct {
        Some(t) => t,
        None => track_camera(&input.detections, &input.embeddings, config)?,
    };
    let zones = build_zones(&sct, config)?;
    let reconnection = reconnect_isolated(&sct, &zones, &input.embeddings, config)?;
    let mut trajectories = reconnection.trajectories;
    let mut directions = [0usize; 8];
    for t in &mut trajectories {
        t.fused = Some(fuse_trajectory(t, input, config)?);
        if let Some(m) = model {
            t.zone_pair = m.assign(t, config)?;
        }
        if let Some(bin) = input.keypoints.as_ref().and_then(|kp| dominant_direction(t, kp)) {
            directions[bin as usize] += 1;
        }
    }
    debug!(
        "camera {}: {} sct trajectories, {} zones, {} merges",
        input.camera_id,
        sct.len(),
        zones.len(),
        reconnection.merges.len()
    );
    Ok(CameraStage {
        camera_id: input.camera_id,
        sct,
        zones,
        merges: reconnection.merges,
        trajectories,
        directions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraReport {
    pub camera_id: u32,
    pub detections: usize,
    pub sct_trajectories: usize,
    pub zones: usize,
    pub reconnections: usize,
    pub trajectories: usize,
    pub assigned_zone_pairs: usize,
    /// Trajectories per dominant direction bin.
    pub direction_bins: [usize; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub link_index: usize,
    pub source_camera: u32,
    pub destination_camera: u32,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub constrained: bool,
    pub cameras: Vec<CameraReport>,
    pub trajectories: usize,
    pub cross_camera_pairs: usize,
    pub candidate_pairs: usize,
    pub pruned_fraction: f64,
    pub global_ids: usize,
    pub links: Vec<LinkReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub stages: Vec<CameraStage>,
    pub assignment: GlobalAssignment,
    /// Final `camera_id,frame,global_id,x,y,w,h` rows on camera clocks.
    pub tracks: Vec<TrackRow>,
    pub report: RunReport,
}

/// Runs the whole pipeline. Per-camera stages use up to `jobs` threads;
/// clustering is sequential and results do not depend on `jobs`.
pub fn run(
    inputs: &[CameraInput],
    sct: Option<BTreeMap<u32, Vec<Trajectory>>>,
    config: &PipelineConfig,
    model: Option<&CameraLinkModel>,
    jobs: usize,
) -> Result<RunOutput> {
    config.validate()?;
    if model.is_none() {
        warn!("no camera link model given; every cross-camera pair is a candidate");
    }
    let mut sct = sct.unwrap_or_default();
    let work: Vec<(&CameraInput, Option<Vec<Trajectory>>)> =
        inputs.iter().map(|i| (i, sct.remove(&i.camera_id))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
    let stages: Vec<CameraStage> = pool.install(|| {
        work.into_par_iter()
            .map(|(input, s)| run_camera(input, s, config, model))
            .collect::<Result<_>>()
    })?;

    let all: Vec<Trajectory> = stages.iter().flat_map(|s| s.trajectories.iter().cloned()).collect();
    let matrix = pool.install(|| build_distance_matrix(&all, model))?;
    let assignment = hierarchical_cluster(&matrix, config.cluster_distance_threshold, config.cluster_iterations);

    let mut tracks = Vec::new();
    for (t, gid) in all.iter().zip(&assignment.labels) {
        let offset = config.frame_offset(t.camera_id);
        tracks.extend(t.detections.iter().map(|d| TrackRow {
            camera_id: t.camera_id,
            frame: d.frame - offset,
            id: *gid,
            bbox: d.bbox,
        }));
    }

    let cross = matrix.cross_camera_count();
    let candidates = matrix.finite_count();
    let links = match model {
        Some(m) => assignment
            .link_matches
            .iter()
            .map(|(&k, pairs)| LinkReport {
                link_index: k,
                source_camera: m.links[k].source.camera_id,
                destination_camera: m.links[k].destination.camera_id,
                matches: pairs.len(),
            })
            .collect(),
        None => Vec::new(),
    };
    let report = RunReport {
        constrained: model.is_some(),
        cameras: stages
            .iter()
            .zip(inputs)
            .map(|(s, i)| CameraReport {
                camera_id: s.camera_id,
                detections: i.detections.len(),
                sct_trajectories: s.sct.len(),
                zones: s.zones.len(),
                reconnections: s.merges.len(),
                trajectories: s.trajectories.len(),
                assigned_zone_pairs: s.trajectories.iter().filter(|t| t.zone_pair.is_some()).count(),
                direction_bins: s.directions,
            })
            .collect(),
        trajectories: all.len(),
        cross_camera_pairs: cross,
        candidate_pairs: candidates,
        pruned_fraction: if cross == 0 {
            0.0
        } else {
            1.0 - candidates as f64 / cross as f64
        },
        global_ids: assignment.cluster_count(),
        links,
    };
    Ok(RunOutput {
        stages,
        assignment,
        tracks,
        report,
    })
}

/// Writes `tracks.csv`, `report.json` and `zones.csv` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    write_text(&dir.join("tracks.csv"), &write_track_rows(&out.tracks))?;
    write_text(
        &dir.join("report.json"),
        &(serde_json::to_string_pretty(&out.report)? + "\n"),
    )?;
    let zones: Vec<Zone> = out.stages.iter().flat_map(|s| s.zones.iter().cloned()).collect();
    write_text(&dir.join("zones.csv"), &write_zones(&zones))
}

/// Per-camera trajectories of a labelled track set, as `(global_id, trajectory)`.
pub fn labelled_trajectories(gt: &TrackSet, config: &PipelineConfig) -> BTreeMap<u32, Vec<(u64, Trajectory)>> {
    let mut out: BTreeMap<u32, Vec<(u64, Trajectory)>> = BTreeMap::new();
    for (&gid, cams) in gt {
        for (&camera_id, seq) in cams {
            let offset = config.frame_offset(camera_id);
            let dets = seq
                .iter()
                .map(|&(frame, bbox)| Detection {
                    camera_id,
                    frame: frame + offset,
                    det_index: 0,
                    bbox,
                    confidence: 1.0,
                })
                .collect();
            out.entry(camera_id)
                .or_default()
                .push((gid, Trajectory::new(camera_id, gid, dets)));
        }
    }
    out
}

/// Learns a camera link model from labelled tracks. Zones come from
/// `zones` when given, otherwise from the tracks themselves.
pub fn train_link_model(
    gt: &TrackSet,
    zones: Option<&[Zone]>,
    config: &PipelineConfig,
) -> Result<(CameraLinkModel, LearnStats)> {
    let mut cameras = Vec::new();
    let mut training = Vec::new();
    for (camera_id, labelled) in labelled_trajectories(gt, config) {
        let trajectories: Vec<Trajectory> = labelled.iter().map(|(_, t)| t.clone()).collect();
        let cam_zones = match zones {
            Some(z) => z.iter().filter(|z| z.camera_id == camera_id).cloned().collect(),
            None => build_zones(&trajectories, config)?,
        };
        let zone_pairs = enumerate_zone_pairs(&cam_zones);
        for (gid, mut t) in labelled {
            t.zone_pair = assign_zone_pair(&t, &zone_pairs, &cam_zones, config)?;
            training.push(TrainingTrajectory {
                global_id: gid,
                trajectory: t,
            });
        }
        cameras.push(CameraZones {
            camera_id,
            zones: cam_zones,
            zone_pairs,
        });
    }
    let (model, stats) = learn_links(&training, cameras, config);
    if stats.skipped_unassigned > 0 {
        warn!(
            "{} training trajectories matched no zone pair",
            stats.skipped_unassigned
        );
    }
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ScenarioSpec};

    fn inputs_for(spec: &ScenarioSpec) -> Vec<CameraInput> {
        let sc = generate(spec).unwrap();
        sc.cameras.into_iter().map(CameraInput::from).collect()
    }

    #[test]
    fn jobs_do_not_change_results() {
        let mut spec = ScenarioSpec::chain(1);
        spec.vehicles.count = 6;
        spec.frames = 1600;
        let inputs = inputs_for(&spec);
        let cfg = PipelineConfig::default();
        let a = run(&inputs, None, &cfg, None, 1).unwrap();
        let b = run(&inputs, None, &cfg, None, 4).unwrap();
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.report, b.report);
        assert!(!a.report.constrained);
    }

    #[test]
    fn rows_round_trip_to_trajectories() {
        let mut spec = ScenarioSpec::chain(2);
        spec.vehicles.count = 4;
        spec.cameras.truncate(1);
        spec.frames = 800;
        let inputs = inputs_for(&spec);
        let cfg = PipelineConfig::default();
        let sct = track_camera(&inputs[0].detections, &inputs[0].embeddings, &cfg).unwrap();
        let rows = trajectory_rows(&sct, &cfg);
        let back = trajectories_from_rows(&inputs[0], &rows, &cfg).unwrap();
        assert_eq!(back, sct);
    }

    #[test]
    fn directions_follow_lanes() {
        let mut spec = ScenarioSpec::chain(3);
        spec.vehicles.count = 4;
        spec.cameras.truncate(1);
        spec.frames = 1700;
        let inputs = inputs_for(&spec);
        let out = run(&inputs, None, &PipelineConfig::default(), None, 1).unwrap();
        let bins = out.report.cameras[0].direction_bins;
        // eastbound is 0°, westbound 180°
        assert_eq!(bins[0], 2);
        assert_eq!(bins[4], 2);
    }
}
