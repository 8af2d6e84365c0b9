//! Deterministic synthetic multi-camera scenarios.
//!
//! Vehicles drive along polyline roads on a shared world plane. Each camera
//! sees an axis-aligned window of that plane through an affine map, so ground
//! truth is exact. Every output file draws from its own ChaCha stream keyed by
//! (seed, file role), which keeps files independent of each other.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l2_normalize, BBox};
use crate::ingest::{
    write_detections, write_embeddings, write_keypoints, write_metadata, write_text, write_track_rows, DetKey,
    Detection, EmbeddingTable, MetadataTable, TrackRow, WheelKeypoints,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub id: u32,
    /// World position of the image's top-left corner.
    pub origin: (f64, f64),
    pub width: f64,
    pub height: f64,
    /// Pixels per world unit.
    pub scale: f64,
}

impl CameraSpec {
    /// Visible world rectangle.
    pub fn fov(&self) -> BBox {
        BBox::new(
            self.origin.0,
            self.origin.1,
            self.width / self.scale,
            self.height / self.scale,
        )
    }

    pub fn project(&self, (x, y): (f64, f64)) -> (f64, f64) {
        ((x - self.origin.0) * self.scale, (y - self.origin.1) * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSpec {
    pub points: Vec<(f64, f64)>,
}

impl RoadSpec {
    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
            .sum()
    }

    /// Position and unit heading at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let mut rest = s.max(0.0);
        let last = self.points.len() - 2;
        for (k, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if rest <= len || k == last {
                let t = if len > 0.0 { (rest / len).min(1.0) } else { 0.0 };
                let heading = if len > 0.0 {
                    ((b.0 - a.0) / len, (b.1 - a.1) / len)
                } else {
                    (1.0, 0.0)
                };
                return ((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), heading);
            }
            rest -= len;
        }
        unreachable!("road has at least one segment")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub count: usize,
    /// Frames between consecutive spawns on the same road, inclusive range.
    pub spawn_interval: (i64, i64),
    /// World units per frame, inclusive range.
    pub speed: (f64, f64),
    /// Smallest bumper-to-bumper center distance on a road.
    pub min_gap: f64,
    /// World-space box size.
    pub size: (f64, f64),
}

/// Every vehicle on `road` halts at arc length `position` for `duration`
/// frames. Occluded stops hide the vehicle while it waits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopEvent {
    pub road: usize,
    pub position: f64,
    pub duration: i64,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Pixel standard deviation added to each box coordinate.
    pub box_sigma: f64,
    pub miss_rate: f64,
    /// Chance per camera and frame of one spurious detection.
    pub false_positive_rate: f64,
    pub embedding_sigma: f64,
    /// Fraction of the embedding noise variance that is fixed per vehicle and
    /// camera (viewpoint bias) rather than drawn afresh every frame.
    #[serde(default)]
    pub embedding_view_share: f64,
    pub metadata_flip_rate: f64,
}

/// Latent appearance: vehicles share one of `models` prototypes (and its
/// metadata classes) and differ from it by roughly `individuality`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSpec {
    pub dim: usize,
    pub models: usize,
    pub individuality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub frames: i64,
    /// World plane extent; every camera view must lie inside it.
    pub world: BBox,
    pub cameras: Vec<CameraSpec>,
    pub roads: Vec<RoadSpec>,
    pub vehicles: VehicleSpec,
    #[serde(default)]
    pub stops: Vec<StopEvent>,
    pub noise: NoiseSpec,
    pub appearance: AppearanceSpec,
    pub metadata: Vec<AttributeSpec>,
}

fn default_attributes() -> Vec<AttributeSpec> {
    [("brand", 10), ("color", 8), ("type", 6)]
        .into_iter()
        .map(|(name, classes)| AttributeSpec {
            name: name.into(),
            classes,
        })
        .collect()
}

impl ScenarioSpec {
    /// Four cameras side by side along a two-way road, 600 world units apart.
    pub fn chain(seed: u64) -> Self {
        let stride = 1920.0 + 600.0;
        let end = 3.0 * stride + 1920.0 + 400.0;
        Self {
            seed,
            frames: 2400,
            world: BBox::new(-500.0, -100.0, end + 1000.0, 1300.0),
            cameras: (0..4)
                .map(|k| CameraSpec {
                    id: k + 1,
                    origin: (k as f64 * stride, 0.0),
                    width: 1920.0,
                    height: 1080.0,
                    scale: 1.0,
                })
                .collect(),
            roads: vec![
                RoadSpec {
                    points: vec![(-400.0, 300.0), (end, 300.0)],
                },
                RoadSpec {
                    points: vec![(end, 780.0), (-400.0, 780.0)],
                },
            ],
            vehicles: VehicleSpec {
                count: 20,
                spawn_interval: (50, 90),
                speed: (9.0, 11.0),
                min_gap: 250.0,
                size: (120.0, 80.0),
            },
            stops: Vec::new(),
            noise: NoiseSpec {
                box_sigma: 1.5,
                miss_rate: 0.02,
                false_positive_rate: 0.0,
                embedding_sigma: 0.05,
                embedding_view_share: 0.1,
                metadata_flip_rate: 0.1,
            },
            appearance: AppearanceSpec {
                dim: 16,
                models: 4,
                individuality: 0.15,
            },
            metadata: default_attributes(),
        }
    }

    /// One camera with an occluded 120-frame stop halfway along its road.
    pub fn stop_line(seed: u64) -> Self {
        Self {
            seed,
            frames: 2600,
            world: BBox::new(-500.0, -100.0, 3000.0, 1300.0),
            cameras: vec![CameraSpec {
                id: 1,
                origin: (0.0, 0.0),
                width: 1920.0,
                height: 1080.0,
                scale: 1.0,
            }],
            roads: vec![RoadSpec {
                points: vec![(-300.0, 400.0), (2300.0, 400.0)],
            }],
            vehicles: VehicleSpec {
                count: 8,
                spawn_interval: (200, 260),
                speed: (9.0, 11.0),
                min_gap: 250.0,
                size: (120.0, 80.0),
            },
            stops: vec![StopEvent {
                road: 0,
                position: 1260.0,
                duration: 120,
                occluded: true,
            }],
            noise: NoiseSpec {
                box_sigma: 1.0,
                miss_rate: 0.0,
                false_positive_rate: 0.0,
                embedding_sigma: 0.05,
                embedding_view_share: 0.0,
                metadata_flip_rate: 0.0,
            },
            appearance: AppearanceSpec {
                dim: 16,
                models: 8,
                individuality: 0.3,
            },
            metadata: default_attributes(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} {v} outside [0,1]")))
            }
        };
        rate("miss_rate", self.noise.miss_rate)?;
        rate("false_positive_rate", self.noise.false_positive_rate)?;
        rate("metadata_flip_rate", self.noise.metadata_flip_rate)?;
        rate("embedding_view_share", self.noise.embedding_view_share)?;
        if self.noise.box_sigma < 0.0 || self.noise.embedding_sigma < 0.0 || self.appearance.individuality < 0.0 {
            return Err(Error::validation("noise scales must be nonnegative"));
        }
        if self.frames <= 0 {
            return Err(Error::validation("frames must be positive"));
        }
        let mut ids: Vec<u32> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.cameras.len() {
            return Err(Error::validation("camera ids must be unique"));
        }
        for c in &self.cameras {
            if !(c.width > 0.0 && c.height > 0.0 && c.scale > 0.0) {
                return Err(Error::validation(format!("camera {} has a degenerate view", c.id)));
            }
            let fov = c.fov();
            let w = &self.world;
            if fov.x < w.x || fov.y < w.y || fov.right() > w.right() || fov.bottom() > w.bottom() {
                return Err(Error::validation(format!(
                    "camera {} view extends beyond the world plane",
                    c.id
                )));
            }
        }
        if self.roads.is_empty() || self.roads.iter().any(|r| r.points.len() < 2 || r.length() <= 0.0) {
            return Err(Error::validation("every road needs at least two distinct points"));
        }
        let v = &self.vehicles;
        if !(v.speed.0 > 0.0 && v.speed.0 <= v.speed.1) {
            return Err(Error::validation("speed range must be positive and ordered"));
        }
        if !(v.spawn_interval.0 >= 1 && v.spawn_interval.0 <= v.spawn_interval.1) {
            return Err(Error::validation("spawn interval must be at least 1 and ordered"));
        }
        if !(v.size.0 > 0.0 && v.size.1 > 0.0) || v.min_gap < 0.0 {
            return Err(Error::validation("vehicle size must be positive"));
        }
        if self.stops.iter().any(|s| s.road >= self.roads.len() || s.duration < 0) {
            return Err(Error::validation(
                "stop event refers to a missing road or has negative duration",
            ));
        }
        if self.appearance.dim == 0 || self.appearance.models == 0 {
            return Err(Error::validation(
                "appearance needs a positive dimension and model count",
            ));
        }
        if self.metadata.iter().any(|a| a.classes < 2) {
            return Err(Error::validation("metadata attributes need at least two classes"));
        }
        Ok(())
    }
}

/// Output file roles, each with its own random stream.
#[derive(Debug, Clone, Copy)]
enum Role {
    Traffic,
    Latent,
    Detections,
    Embeddings,
    Metadata(usize),
}

fn stream(seed: u64, role: Role, camera_id: u32) -> ChaCha8Rng {
    let code: u64 = match role {
        Role::Traffic => 1,
        Role::Latent => 2,
        Role::Detections => 3,
        Role::Embeddings => 4,
        Role::Metadata(k) => 16 + k as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((code << 32) | camera_id as u64);
    rng
}

/// A ground-truth move from one camera to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueTransition {
    pub global_id: u64,
    pub src_camera: u32,
    pub dst_camera: u32,
    /// Last frame the vehicle is visible in the source camera.
    pub t_src: i64,
    /// First frame it is visible in the destination camera.
    pub t_dst: i64,
    pub dt: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraData {
    pub camera_id: u32,
    pub detections: Vec<Detection>,
    pub embeddings: EmbeddingTable,
    pub metadata: Vec<MetadataTable>,
    pub keypoints: BTreeMap<DetKey, WheelKeypoints>,
    /// Ground-truth identity of each detection; false positives are absent.
    pub truth: BTreeMap<DetKey, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub cameras: Vec<CameraData>,
    pub ground_truth: Vec<TrackRow>,
    pub transitions: Vec<TrueTransition>,
    /// Noise-free appearance per vehicle, indexed by `global_id - 1`.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct VehicleState {
    road: usize,
    spawn_frame: i64,
    speed: f64,
    s: f64,
    spawned: bool,
    finished: bool,
    stop_left: i64,
    stop_occluded: bool,
    next_stop: usize,
}

/// Per-frame world state of one vehicle.
#[derive(Debug, Clone, Copy)]
struct Pose {
    vehicle: usize,
    center: (f64, f64),
    heading: (f64, f64),
    hidden: bool,
}

fn simulate(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Pose>> {
    let v = &spec.vehicles;
    let mut next_spawn = vec![0i64; spec.roads.len()];
    let mut states = Vec::with_capacity(v.count);
    for k in 0..v.count {
        let road = k % spec.roads.len();
        let spawn_frame = next_spawn[road];
        next_spawn[road] += rng.random_range(v.spawn_interval.0..=v.spawn_interval.1);
        states.push(VehicleState {
            road,
            spawn_frame,
            speed: rng.random_range(v.speed.0..=v.speed.1),
            s: 0.0,
            spawned: false,
            finished: false,
            stop_left: 0,
            stop_occluded: false,
            next_stop: 0,
        });
    }
    let mut stops_by_road: Vec<Vec<&StopEvent>> = vec![Vec::new(); spec.roads.len()];
    for s in &spec.stops {
        stops_by_road[s.road].push(s);
    }
    for list in &mut stops_by_road {
        list.sort_by(|a, b| a.position.total_cmp(&b.position));
    }
    let lengths: Vec<f64> = spec.roads.iter().map(RoadSpec::length).collect();

    let mut frames = Vec::with_capacity(spec.frames as usize);
    for f in 0..spec.frames {
        // vehicles on a road are updated in spawn order, so a leader has
        // already moved when its follower is placed
        let mut leader: Vec<Option<f64>> = vec![None; spec.roads.len()];
        let mut poses = Vec::new();
        for (k, st) in states.iter_mut().enumerate() {
            if st.finished {
                continue;
            }
            let lead = leader[st.road];
            let mut waiting = false;
            if !st.spawned {
                let clear = lead.is_none_or(|l| l >= v.min_gap);
                if f >= st.spawn_frame && clear {
                    st.spawned = true;
                } else {
                    // queued spawns block later ones on the same road
                    leader[st.road] = Some(lead.map_or(0.0, |l| l.min(0.0)));
                    continue;
                }
            } else if st.stop_left > 0 {
                st.stop_left -= 1;
                waiting = true;
            } else {
                let mut target = st.s + st.speed;
                if let Some(l) = lead {
                    target = target.min(l - v.min_gap).max(st.s);
                }
                if let Some(stop) = stops_by_road[st.road].get(st.next_stop) {
                    if stop.position > st.s && stop.position <= target {
                        target = stop.position;
                        st.stop_left = stop.duration;
                        st.stop_occluded = stop.occluded;
                        st.next_stop += 1;
                    }
                }
                st.s = target;
            }
            if st.s > lengths[st.road] {
                st.finished = true;
                continue;
            }
            leader[st.road] = Some(st.s);
            let (center, heading) = spec.roads[st.road].at(st.s);
            poses.push(Pose {
                vehicle: k,
                center,
                heading,
                hidden: waiting && st.stop_occluded,
            });
        }
        frames.push(poses);
    }
    frames
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vector(rng, dim, 1.0);
        if l2_normalize(&mut v) > 0.0 {
            return v;
        }
    }
}

fn one_hot(classes: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[k] = 1.0;
    v
}

struct Identity {
    latent: Vec<f64>,
    attributes: Vec<usize>,
}

fn identities(spec: &ScenarioSpec) -> Vec<Identity> {
    let mut rng = stream(spec.seed, Role::Latent, 0);
    let a = &spec.appearance;
    let prototypes: Vec<(Vec<f64>, Vec<usize>)> = (0..a.models)
        .map(|_| {
            let p = unit_vector(&mut rng, a.dim);
            let attrs = spec.metadata.iter().map(|m| rng.random_range(0..m.classes)).collect();
            (p, attrs)
        })
        .collect();
    (0..spec.vehicles.count)
        .map(|_| {
            let (proto, attrs) = prototypes.choose(&mut rng).expect("at least one model");
            let offset = gaussian_vector(&mut rng, a.dim, a.individuality / (a.dim as f64).sqrt());
            let mut latent: Vec<f64> = proto.iter().zip(&offset).map(|(p, o)| p + o).collect();
            if l2_normalize(&mut latent) == 0.0 {
                latent = proto.clone();
            }
            Identity {
                latent,
                attributes: attrs.clone(),
            }
        })
        .collect()
}

fn keypoints_for(b: &BBox, heading: (f64, f64)) -> WheelKeypoints {
    let (cx, cy) = b.center();
    let along = 0.35 * b.w.max(b.h);
    let across = 0.3 * b.w.min(b.h);
    let (hx, hy) = heading;
    let (px, py) = (-hy, hx);
    let pt = |a: f64, c: f64| (cx + a * hx + c * px, cy + a * hy + c * py);
    WheelKeypoints {
        front_left: pt(along, across),
        front_right: pt(along, -across),
        back_left: pt(-along, across),
        back_right: pt(-along, -across),
    }
}

fn in_image(b: &BBox, c: &CameraSpec) -> bool {
    b.x >= 0.0 && b.y >= 0.0 && b.right() <= c.width && b.bottom() <= c.height
}

/// Generates the scenario described by `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let ids = identities(spec);
    let poses = simulate(spec, &mut stream(spec.seed, Role::Traffic, 0));
    let noise = &spec.noise;
    let (vw, vh) = spec.vehicles.size;

    let mut ground_truth = Vec::new();
    let mut cameras = Vec::with_capacity(spec.cameras.len());
    for cam in &spec.cameras {
        let cid = cam.id;
        let mut det_rng = stream(spec.seed, Role::Detections, cid);
        let mut emb_rng = stream(spec.seed, Role::Embeddings, cid);
        let mut meta_rngs: Vec<ChaCha8Rng> = (0..spec.metadata.len())
            .map(|k| stream(spec.seed, Role::Metadata(k), cid))
            .collect();
        let jitter = Normal::new(0.0, noise.box_sigma).expect("nonnegative sigma");
        let view_sigma = noise.embedding_sigma * noise.embedding_view_share.sqrt();
        let frame_sigma = noise.embedding_sigma * (1.0 - noise.embedding_view_share).sqrt();
        let view_bias: Vec<Vec<f64>> = (0..spec.vehicles.count)
            .map(|_| gaussian_vector(&mut emb_rng, spec.appearance.dim, view_sigma))
            .collect();

        let mut data = CameraData {
            camera_id: cid,
            detections: Vec::new(),
            embeddings: EmbeddingTable::new(spec.appearance.dim),
            metadata: spec
                .metadata
                .iter()
                .map(|m| MetadataTable {
                    attribute: m.name.clone(),
                    class_count: m.classes,
                    rows: BTreeMap::new(),
                })
                .collect(),
            keypoints: BTreeMap::new(),
            truth: BTreeMap::new(),
        };

        for (f, frame_poses) in poses.iter().enumerate() {
            let frame = f as i64;
            let mut det_index = 0u32;
            for p in frame_poses {
                let (cx, cy) = cam.project(p.center);
                let truth = BBox::from_center(cx, cy, vw * cam.scale, vh * cam.scale);
                if p.hidden || !in_image(&truth, cam) {
                    continue;
                }
                let gid = p.vehicle as u64 + 1;
                ground_truth.push(TrackRow {
                    camera_id: cid,
                    frame,
                    id: gid,
                    bbox: truth,
                });
                if det_rng.random::<f64>() < noise.miss_rate {
                    continue;
                }
                let bbox = BBox::new(
                    truth.x + jitter.sample(&mut det_rng),
                    truth.y + jitter.sample(&mut det_rng),
                    (truth.w + jitter.sample(&mut det_rng)).max(1.0),
                    (truth.h + jitter.sample(&mut det_rng)).max(1.0),
                );
                let confidence = det_rng.random_range(0.5..=1.0);
                let d = Detection {
                    camera_id: cid,
                    frame,
                    det_index,
                    bbox,
                    confidence,
                };
                det_index += 1;
                let identity = &ids[p.vehicle];
                let noise_v = gaussian_vector(&mut emb_rng, spec.appearance.dim, frame_sigma);
                let mut e: Vec<f64> = identity
                    .latent
                    .iter()
                    .zip(&noise_v)
                    .zip(&view_bias[p.vehicle])
                    .map(|((l, n), b)| l + n + b)
                    .collect();
                if l2_normalize(&mut e) == 0.0 {
                    e = identity.latent.clone();
                }
                data.embeddings.rows.insert(d.key(), e);
                for (k, attr) in spec.metadata.iter().enumerate() {
                    let rng = &mut meta_rngs[k];
                    let mut class = identity.attributes[k];
                    if rng.random::<f64>() < noise.metadata_flip_rate {
                        class = (class + rng.random_range(1..attr.classes)) % attr.classes;
                    }
                    data.metadata[k].rows.insert(d.key(), one_hot(attr.classes, class));
                }
                data.keypoints.insert(d.key(), keypoints_for(&bbox, p.heading));
                data.truth.insert(d.key(), gid);
                data.detections.push(d);
            }
            if det_rng.random::<f64>() < noise.false_positive_rate {
                let w = vw * cam.scale * det_rng.random_range(0.5..1.5);
                let h = vh * cam.scale * det_rng.random_range(0.5..1.5);
                let bbox = BBox::new(
                    det_rng.random_range(0.0..(cam.width - w).max(1.0)),
                    det_rng.random_range(0.0..(cam.height - h).max(1.0)),
                    w,
                    h,
                );
                let d = Detection {
                    camera_id: cid,
                    frame,
                    det_index,
                    bbox,
                    confidence: det_rng.random_range(0.1..0.6),
                };
                data.embeddings
                    .rows
                    .insert(d.key(), unit_vector(&mut emb_rng, spec.appearance.dim));
                for (k, attr) in spec.metadata.iter().enumerate() {
                    let class = meta_rngs[k].random_range(0..attr.classes);
                    data.metadata[k].rows.insert(d.key(), one_hot(attr.classes, class));
                }
                let angle = det_rng.random_range(0.0..std::f64::consts::TAU);
                data.keypoints
                    .insert(d.key(), keypoints_for(&bbox, (angle.cos(), angle.sin())));
                data.detections.push(d);
            }
        }
        cameras.push(data);
    }

    let transitions = true_transitions(&ground_truth);
    Ok(Scenario {
        spec: spec.clone(),
        cameras,
        ground_truth,
        transitions,
        latents: ids.into_iter().map(|i| i.latent).collect(),
    })
}

/// Consecutive camera visits of every vehicle, ordered by first sighting.
fn true_transitions(gt: &[TrackRow]) -> Vec<TrueTransition> {
    let mut spans: BTreeMap<u64, BTreeMap<u32, (i64, i64)>> = BTreeMap::new();
    for r in gt {
        let e = spans
            .entry(r.id)
            .or_default()
            .entry(r.camera_id)
            .or_insert((r.frame, r.frame));
        e.0 = e.0.min(r.frame);
        e.1 = e.1.max(r.frame);
    }
    let mut out = Vec::new();
    for (gid, cams) in spans {
        let mut visits: Vec<(u32, (i64, i64))> = cams.into_iter().collect();
        visits.sort_by_key(|(c, (first, _))| (*first, *c));
        for w in visits.windows(2) {
            let (src, (_, t_src)) = w[0];
            let (dst, (t_dst, _)) = w[1];
            out.push(TrueTransition {
                global_id: gid,
                src_camera: src,
                dst_camera: dst,
                t_src,
                t_dst,
                dt: t_dst - t_src,
            });
        }
    }
    out
}

impl Scenario {
    /// Writes `scenario.json`, `gt.csv`, `true_links.json` and one
    /// `cam_<id>/` directory of detection, embedding, metadata and keypoint
    /// files per camera.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("scenario.json"), &self.spec.to_json())?;
        write_text(&dir.join("gt.csv"), &write_track_rows(&self.ground_truth))?;
        write_text(
            &dir.join("true_links.json"),
            &serde_json::to_string_pretty(&self.transitions)?,
        )?;
        for cam in &self.cameras {
            let cdir = dir.join(format!("cam_{}", cam.camera_id));
            write_text(&cdir.join("det.csv"), &write_detections(&cam.detections))?;
            write_text(&cdir.join("emb.csv"), &write_embeddings(&cam.embeddings))?;
            for m in &cam.metadata {
                write_text(&cdir.join(format!("meta_{}.csv", m.attribute)), &write_metadata(m))?;
            }
            write_text(&cdir.join("keypoints.csv"), &write_keypoints(&cam.keypoints))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::track_set_from_rows;

    fn tiny(seed: u64) -> ScenarioSpec {
        let mut s = ScenarioSpec::chain(seed);
        s.cameras.truncate(2);
        s.vehicles.count = 1;
        s.vehicles.speed = (10.0, 10.0);
        s.frames = 800;
        s.noise = NoiseSpec {
            box_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            embedding_sigma: 0.0,
            embedding_view_share: 0.0,
            metadata_flip_rate: 0.0,
        };
        s
    }

    #[test]
    fn noiseless_single_vehicle() {
        let sc = generate(&tiny(3)).unwrap();
        let gt = track_set_from_rows(&sc.ground_truth).unwrap();
        assert_eq!(gt.len(), 1);
        let cams = &gt[&1];
        assert_eq!(cams.len(), 2);
        for seq in cams.values() {
            // one unbroken run of frames per camera
            assert!(seq.windows(2).all(|w| w[1].0 == w[0].0 + 1));
        }
        assert_eq!(sc.transitions.len(), 1);
        let t = &sc.transitions[0];
        // center travels 600 + 120 world units between the last and first fully visible frames
        assert_eq!((t.src_camera, t.dst_camera), (1, 2));
        assert!((t.dt - 72).abs() <= 1, "{t:?}");
        for cam in &sc.cameras {
            assert_eq!(cam.detections.len(), gt[&1][&cam.camera_id].len());
            for e in cam.embeddings.rows.values() {
                assert_eq!(e, &sc.latents[0]);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&ScenarioSpec::chain(11)).unwrap();
        let b = generate(&ScenarioSpec::chain(11)).unwrap();
        assert_eq!(a, b);
        let c = generate(&ScenarioSpec::chain(12)).unwrap();
        assert_ne!(a.ground_truth, c.ground_truth);
    }

    #[test]
    fn files_are_byte_identical() {
        let spec = tiny(5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&spec).unwrap().write(d1.path()).unwrap();
        generate(&spec).unwrap().write(d2.path()).unwrap();
        for rel in [
            "gt.csv",
            "true_links.json",
            "cam_1/det.csv",
            "cam_2/emb.csv",
            "cam_1/meta_color.csv",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn camera_off_world_rejected() {
        let mut s = tiny(1);
        s.cameras[0].origin = (-10_000.0, 0.0);
        assert!(matches!(generate(&s), Err(Error::Validation(_))));
        let mut s = tiny(1);
        s.noise.miss_rate = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn stop_event_hides_vehicle_long_enough_to_split() {
        let sc = generate(&ScenarioSpec::stop_line(2)).unwrap();
        let gt = track_set_from_rows(&sc.ground_truth).unwrap();
        for cams in gt.values() {
            let seq = &cams[&1];
            let gaps: Vec<i64> = seq.windows(2).map(|w| w[1].0 - w[0].0).filter(|g| *g > 1).collect();
            assert_eq!(gaps, vec![121]);
        }
    }

    #[test]
    fn every_true_detection_in_one_gt_track() {
        let sc = generate(&ScenarioSpec::chain(4)).unwrap();
        let gt: BTreeMap<(u32, i64, u64), BBox> = sc
            .ground_truth
            .iter()
            .map(|r| ((r.camera_id, r.frame, r.id), r.bbox))
            .collect();
        for cam in &sc.cameras {
            for d in &cam.detections {
                let gid = cam.truth[&d.key()];
                assert!(gt.contains_key(&(cam.camera_id, d.frame, gid)));
            }
        }
    }

    #[test]
    fn followers_never_overtake() {
        let sc = generate(&ScenarioSpec::chain(9)).unwrap();
        // per road and camera, vehicles enter in spawn order
        for t in sc.transitions.chunk_by(|a, b| a.global_id == b.global_id) {
            assert!(t.windows(2).all(|w| w[0].t_dst <= w[1].t_src));
        }
        let mut first_seen: BTreeMap<(u32, u64), i64> = BTreeMap::new();
        for r in &sc.ground_truth {
            first_seen.entry((r.camera_id, r.id)).or_insert(r.frame);
        }
        for cam in 1..=4u32 {
            for road in 0..2u64 {
                let order: Vec<i64> = (0..20u64)
                    .filter(|k| k % 2 == road)
                    .filter_map(|k| first_seen.get(&(cam, k + 1)).copied())
                    .collect();
                assert!(
                    order.windows(2).all(|w| w[0] < w[1]),
                    "camera {cam} road {road}: {order:?}"
                );
            }
        }
    }

    #[test]
    fn embedding_noise_matches_sigma() {
        let mut spec = ScenarioSpec::chain(21);
        spec.noise.embedding_sigma = 0.05;
        spec.noise.embedding_view_share = 0.0;
        let sc = generate(&spec).unwrap();
        let dim = spec.appearance.dim;
        let (mut sum_sq, mut samples) = (0.0, 0usize);
        for cam in &sc.cameras {
            for (key, gid) in &cam.truth {
                let e = cam.embeddings.get(key).unwrap();
                let latent = &sc.latents[*gid as usize - 1];
                let radial: f64 = e.iter().zip(latent).map(|(a, b)| a * b).sum();
                // project back onto the tangent plane at the latent
                sum_sq += e.iter().zip(latent).map(|(a, b)| (a / radial - b).powi(2)).sum::<f64>();
                samples += 1;
            }
        }
        assert!(samples >= 1000);
        let sigma = (sum_sq / (samples * (dim - 1)) as f64).sqrt();
        assert!(
            (sigma - 0.05).abs() <= 0.005,
            "estimated {sigma} from {samples} samples"
        );
    }
}
