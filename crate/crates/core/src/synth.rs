//! Synthetic scenes with known ground truth.
//!
//! A scene is a fixed set of world samples: the four walls of a room and the
//! surfaces of upright box or cylinder objects. Each frame keeps the samples
//! that face the camera and project inside the image. Because samples are
//! shared between frames, geometric overlap and noiseless ICP are exact.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_from_euler, Intrinsics, ObjectPose, RigidPose};
use crate::observations::{FrameRecord, FrameSet, KeypointMatch, ObjectObservation, Symmetry, NOC_HALF_EXTENT};
use crate::spatial::VoxelGrid;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("object {0} is not visible in any frame")]
    InvisibleObject(usize),
    #[error("overlap needs non-empty point sets")]
    EmptyCloud,
    #[error("overlap bucket {0} not filled after {1} attempts")]
    BucketUnreachable(usize, usize),
}

/// Object template: label, metric extent and symmetry class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_label: u32,
    pub extent: Vector3<f64>,
    pub symmetry: Symmetry,
}

impl ObjectSpec {
    pub fn new(class_label: u32, extent: [f64; 3], symmetry: Symmetry) -> Self {
        Self { class_label, extent: Vector3::from(extent), symmetry }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Arc of `orbit_arc_deg` around the room center.
    Orbit,
    /// Sideways translation by `line_step` per frame.
    Line,
    /// Full circle around the room center; the last frame neighbors the first.
    Loop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_frames: usize,
    pub num_objects: usize,
    /// Object `o` uses `object_specs[o % len]`.
    pub object_specs: Vec<ObjectSpec>,
    pub trajectory: Trajectory,
    pub orbit_radius: f64,
    pub orbit_arc_deg: f64,
    pub line_step: f64,
    pub camera_height: f64,
    pub points_per_object: usize,
    pub wall_points: usize,
    pub room_half_extent: f64,
    /// Objects other than the first are placed within this radius.
    pub object_spread: f64,
    pub keypoints_per_pair: usize,
    /// Only pairs at most this many frames apart get keypoints.
    pub keypoint_max_gap: Option<usize>,
    pub noise_sigma_depth: f64,
    pub noise_sigma_noc: f64,
    /// Relative error of scale estimates.
    pub scale_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_min_dist: f64,
    pub outlier_max_dist: f64,
    pub embed_dim: usize,
    pub embed_intra_sigma: f64,
    pub inter_separation: f64,
    pub intrinsics: Intrinsics,
    pub min_depth: f64,
    pub max_depth: f64,
    pub include_clouds: bool,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_frames: 2,
            num_objects: 3,
            object_specs: vec![
                ObjectSpec::new(1, [0.55, 0.9, 0.45], Symmetry::NonSymmetric),
                ObjectSpec::new(2, [1.1, 0.7, 0.65], Symmetry::NonSymmetric),
                ObjectSpec::new(3, [0.6, 1.0, 0.4], Symmetry::NonSymmetric),
                ObjectSpec::new(4, [0.35, 0.6, 0.35], Symmetry::Round),
                ObjectSpec::new(5, [0.45, 0.45, 0.45], Symmetry::Square),
                ObjectSpec::new(6, [0.8, 0.5, 0.4], Symmetry::Rectangle),
            ],
            trajectory: Trajectory::Orbit,
            orbit_radius: 2.2,
            orbit_arc_deg: 30.0,
            line_step: 0.1,
            camera_height: 0.5,
            points_per_object: 600,
            wall_points: 6000,
            room_half_extent: 3.0,
            object_spread: 1.0,
            keypoints_per_pair: 60,
            keypoint_max_gap: None,
            noise_sigma_depth: 0.0,
            noise_sigma_noc: 0.0,
            scale_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_min_dist: 0.5,
            outlier_max_dist: 1.0,
            embed_dim: 16,
            embed_intra_sigma: 0.004,
            inter_separation: 1.0,
            intrinsics: Intrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 },
            min_depth: 0.1,
            max_depth: 8.0,
            include_clouds: true,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_frames == 0 {
            return bad("num_frames must be positive".into());
        }
        if self.num_objects > 0 && self.object_specs.is_empty() {
            return bad("object_specs is empty".into());
        }
        for (i, s) in self.object_specs.iter().enumerate() {
            if s.extent.iter().any(|e| !(*e > 0.0)) {
                return bad(format!("object_specs[{i}] extent must be positive"));
            }
            let round_like = matches!(s.symmetry, Symmetry::Round | Symmetry::Square);
            if round_like && s.extent.x != s.extent.z {
                return bad(format!("object_specs[{i}] is {:?} but x and z extents differ", s.symmetry));
            }
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction must be in [0, 1), got {}", self.outlier_fraction));
        }
        if !(0.0 <= self.outlier_min_dist && self.outlier_min_dist <= self.outlier_max_dist) {
            return bad("need 0 <= outlier_min_dist <= outlier_max_dist".into());
        }
        for (name, v) in [
            ("noise_sigma_depth", self.noise_sigma_depth),
            ("noise_sigma_noc", self.noise_sigma_noc),
            ("scale_noise_sigma", self.scale_noise_sigma),
            ("embed_intra_sigma", self.embed_intra_sigma),
            ("inter_separation", self.inter_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return bad("need 0 < min_depth < max_depth".into());
        }
        if !(self.room_half_extent > self.orbit_radius.max(self.object_spread)) {
            return bad("room_half_extent must exceed orbit_radius and object_spread".into());
        }
        self.intrinsics.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))
    }

    fn spec(&self, object: usize) -> ObjectSpec {
        self.object_specs[object % self.object_specs.len()]
    }
}

/// Ground truth accompanying a generated frame set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub camera_poses: Vec<RigidPose<f64>>,
    pub object_poses: Vec<ObjectPose<f64>>,
    /// Object index of each observation, aligned with `FrameSet::observations`.
    pub observation_objects: Vec<usize>,
    /// Planted outlier flags per observation, aligned with its depth points.
    pub outliers: Vec<Vec<bool>>,
    /// Planted outlier flags, aligned with `FrameSet::keypoint_matches`.
    pub keypoint_outliers: Vec<bool>,
    /// Noiseless world coordinates of the samples each frame sees.
    pub visible_world: Vec<Vec<Vector3<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub frame_set: FrameSet,
    pub truth: SynthTruth,
}

/// Camera-to-world pose at `eye` looking at `target`, with camera `y` pointing
/// down and `z` forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> RigidPose<f64> {
    let z = (target - eye).normalize();
    let up = Vector3::y();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    RigidPose::from_rotation_translation(&Matrix3::from_columns(&[x, y, z]), eye)
}

/// Camera poses along the configured trajectory.
pub fn trajectory_poses(cfg: &SynthConfig) -> Vec<RigidPose<f64>> {
    let k = cfg.num_frames;
    let h = cfg.camera_height;
    let on_circle = |a: f64| {
        let eye = Vector3::new(cfg.orbit_radius * a.sin(), h, -cfg.orbit_radius * a.cos());
        look_at(eye, Vector3::zeros())
    };
    (0..k)
        .map(|n| match cfg.trajectory {
            Trajectory::Orbit => {
                let span = cfg.orbit_arc_deg.to_radians();
                let a = if k > 1 { span * (n as f64 / (k - 1) as f64 - 0.5) } else { 0.0 };
                on_circle(a)
            }
            Trajectory::Loop => on_circle(2.0 * PI * n as f64 / k as f64),
            Trajectory::Line => {
                let x = cfg.line_step * (n as f64 - (k as f64 - 1.0) / 2.0);
                let eye = Vector3::new(x, h, -cfg.orbit_radius);
                look_at(eye, Vector3::new(x, 0.0, 0.0))
            }
        })
        .collect()
}

struct Sample {
    world: Vector3<f64>,
    normal: Vector3<f64>,
    /// `(object, canonical coordinate)` for object samples.
    object: Option<(usize, Vector3<f64>)>,
}

fn wall_samples(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let r = cfg.room_half_extent;
    let (y_lo, y_hi) = (-1.5, 1.5);
    (0..cfg.wall_points)
        .map(|_| {
            let u = rng.random_range(-r..r);
            let y = rng.random_range(y_lo..y_hi);
            let (world, normal) = match rng.random_range(0..4) {
                0 => (Vector3::new(r, y, u), -Vector3::x()),
                1 => (Vector3::new(-r, y, u), Vector3::x()),
                2 => (Vector3::new(u, y, r), -Vector3::z()),
                _ => (Vector3::new(u, y, -r), Vector3::z()),
            };
            Sample { world, normal, object: None }
        })
        .collect()
}

/// Point and outward normal on the surface of an object in its metric frame.
fn surface_point(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
    let e = spec.extent;
    if spec.symmetry == Symmetry::Round {
        let (r, h) = (e.x / 2.0, e.y);
        let side = 2.0 * PI * r * h;
        let cap = PI * r * r;
        let pick = rng.random_range(0.0..side + 2.0 * cap);
        if pick < side {
            let phi = rng.random_range(0.0..2.0 * PI);
            let y = rng.random_range(-h / 2.0..h / 2.0);
            let n = Vector3::new(phi.cos(), 0.0, phi.sin());
            return (Vector3::new(r * phi.cos(), y, r * phi.sin()), n);
        }
        let sign = if pick < side + cap { 1.0 } else { -1.0 };
        let rho = r * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..2.0 * PI);
        return (Vector3::new(rho * phi.cos(), sign * h / 2.0, rho * phi.sin()), Vector3::y() * sign);
    }
    let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if pick < 2.0 * a {
            axis = k;
            break;
        }
        pick -= 2.0 * a;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = Vector3::new(
        rng.random_range(-0.5..0.5) * e.x,
        rng.random_range(-0.5..0.5) * e.y,
        rng.random_range(-0.5..0.5) * e.z,
    );
    p[axis] = sign * e[axis] / 2.0;
    let mut n = Vector3::zeros();
    n[axis] = sign;
    (p, n)
}

/// Rotation about the object's vertical axis that maps its shape onto itself.
fn symmetry_rotation(symmetry: Symmetry, rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let angle = match symmetry {
        Symmetry::NonSymmetric => 0.0,
        Symmetry::Round => rng.random_range(0.0..2.0 * PI),
        Symmetry::Square => rng.random_range(0..4) as f64 * PI / 2.0,
        Symmetry::Rectangle => rng.random_range(0..2) as f64 * PI,
    };
    rotation_from_euler(&Vector3::new(0.0, angle, 0.0))
}

fn shell_offset(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    let dir = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(rng));
    let dir = if dir.norm() > 0.0 { dir.normalize() } else { Vector3::x() };
    let (a, b) = (lo.powi(3), hi.powi(3));
    let r = if hi > lo { rng.random_range(a..=b).cbrt() } else { lo };
    dir * r
}

fn object_poses(cfg: &SynthConfig, rng: &mut ChaCha8Rng, centered_first: bool) -> Vec<ObjectPose<f64>> {
    (0..cfg.num_objects)
        .map(|o| {
            let spec = cfg.spec(o);
            let t = if o == 0 && centered_first {
                Vector3::zeros()
            } else {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = cfg.object_spread * rng.random::<f64>().sqrt();
                Vector3::new(r * a.cos(), rng.random_range(-0.1..0.1), r * a.sin())
            };
            let yaw = rng.random_range(-PI..PI);
            ObjectPose::new(Vector3::new(0.0, yaw, 0.0), t, spec.extent)
        })
        .collect()
}

/// Builds a scene from the configuration.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let cams = trajectory_poses(cfg);
    let objects = object_poses(cfg, &mut rng, false);
    render(cfg, &cams, &objects, &mut rng)
}

fn render(
    cfg: &SynthConfig,
    cams: &[RigidPose<f64>],
    objects: &[ObjectPose<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<SynthScene, SynthError> {
    let k = cams.len();
    let mut samples = wall_samples(cfg, rng);
    for (o, pose) in objects.iter().enumerate() {
        let spec = cfg.spec(o);
        let r = pose.rotation();
        for _ in 0..cfg.points_per_object {
            let (p, n) = surface_point(&spec, rng);
            let noc = p.component_div(&spec.extent);
            samples.push(Sample { world: r * p + pose.translation, normal: r * n, object: Some((o, noc)) });
        }
    }

    // Embedding centers per object, then a per-observation draw.
    let center_scale = cfg.inter_separation / 2f64.sqrt();
    let centers: Vec<Vec<f64>> = (0..objects.len())
        .map(|_| {
            let v: Vec<f64> = (0..cfg.embed_dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * center_scale).collect()
        })
        .collect();
    let normal = |s: f64| Normal::new(0.0, s).expect("sigma validated");
    let depth_noise = normal(cfg.noise_sigma_depth);
    let noc_noise = normal(cfg.noise_sigma_noc);
    let embed_noise = normal(cfg.embed_intra_sigma);
    let scale_noise = normal(cfg.scale_noise_sigma);

    let visible: Vec<Vec<usize>> = cams
        .iter()
        .map(|cam| {
            let inv = cam.inverse();
            (0..samples.len())
                .filter(|&i| {
                    let s = &samples[i];
                    if s.normal.dot(&(cam.translation - s.world)) <= 0.0 {
                        return false;
                    }
                    let q = inv.transform_point(&s.world);
                    if q.z < cfg.min_depth || q.z > cfg.max_depth {
                        return false;
                    }
                    cfg.intrinsics.project(&q).is_some_and(|(u, v)| cfg.intrinsics.in_image(u, v))
                })
                .collect()
        })
        .collect();

    let mut fs = FrameSet::with_frames(k);
    let mut truth = SynthTruth {
        camera_poses: cams.to_vec(),
        object_poses: objects.to_vec(),
        observation_objects: Vec::new(),
        outliers: Vec::new(),
        keypoint_outliers: Vec::new(),
        visible_world: Vec::new(),
    };
    let mut seen = vec![false; objects.len()];
    // Noisy camera-local coordinates of every visible sample, per frame.
    let mut local: Vec<Vec<Option<Vector3<f64>>>> = Vec::with_capacity(k);

    for (f, cam) in cams.iter().enumerate() {
        let inv = cam.inverse();
        let mut frame_local = vec![None; samples.len()];
        for &i in &visible[f] {
            let q = inv.transform_point(&samples[i].world);
            let noise = Vector3::from_fn(|_, _| depth_noise.sample(rng));
            frame_local[i] = Some(q + noise);
        }
        let rec = &mut fs.frames[f];
        *rec = FrameRecord {
            index: f,
            intrinsics: Some(cfg.intrinsics),
            timestamp: Some(f as f64 * 0.1),
            cloud: if cfg.include_clouds {
                visible[f].iter().filter_map(|&i| frame_local[i]).collect()
            } else {
                Vec::new()
            },
        };
        truth.visible_world.push(visible[f].iter().map(|&i| samples[i].world).collect());

        let mut detection = 0u32;
        for (o, pose) in objects.iter().enumerate() {
            let idx: Vec<usize> =
                visible[f].iter().copied().filter(|&i| matches!(samples[i].object, Some((oo, _)) if oo == o)).collect();
            if idx.is_empty() {
                continue;
            }
            seen[o] = true;
            let spec = cfg.spec(o);
            let sym = symmetry_rotation(spec.symmetry, rng);
            let mut noc_points = Vec::with_capacity(idx.len());
            let mut depth_points = Vec::with_capacity(idx.len());
            for &i in &idx {
                let (_, noc) = samples[i].object.expect("object sample");
                let n = sym * noc + Vector3::from_fn(|_, _| noc_noise.sample(rng));
                noc_points.push(n.map(|c| c.clamp(-NOC_HALF_EXTENT, NOC_HALF_EXTENT)));
                depth_points.push(frame_local[i].expect("visible sample"));
            }
            let n_out = (cfg.outlier_fraction * idx.len() as f64).round() as usize;
            let mut flags = vec![false; idx.len()];
            for m in sample(rng, idx.len(), n_out.min(idx.len())) {
                flags[m] = true;
                depth_points[m] += shell_offset(rng, cfg.outlier_min_dist, cfg.outlier_max_dist);
            }
            let scale_estimate = pose.scale.map(|s| (s * (1.0 + scale_noise.sample(rng))).max(0.05 * s));
            let embedding = centers[o].iter().map(|c| c + embed_noise.sample(rng)).collect();
            fs.observations.push(ObjectObservation {
                frame: f,
                detection_id: detection,
                class_label: spec.class_label,
                noc_points,
                depth_points,
                scale_estimate,
                embedding,
                symmetry: spec.symmetry,
            });
            truth.observation_objects.push(o);
            truth.outliers.push(flags);
            detection += 1;
        }
        local.push(frame_local);
    }
    if let Some(o) = seen.iter().position(|s| !s) {
        return Err(SynthError::InvisibleObject(o));
    }

    if cfg.keypoints_per_pair > 0 {
        let max_gap = cfg.keypoint_max_gap.unwrap_or(usize::MAX);
        for i in 0..k {
            for j in i + 1..k {
                if j - i > max_gap {
                    continue;
                }
                let common: Vec<usize> = visible[i].iter().copied().filter(|&s| local[j][s].is_some()).collect();
                if common.is_empty() {
                    continue;
                }
                let n = cfg.keypoints_per_pair.min(common.len());
                let mut picks: Vec<usize> = sample(rng, common.len(), n).into_iter().map(|m| common[m]).collect();
                picks.sort_unstable();
                let n_out = (cfg.outlier_fraction * n as f64).round() as usize;
                let mut flags = vec![false; n];
                for m in sample(rng, n, n_out) {
                    flags[m] = true;
                }
                for (m, s) in picks.into_iter().enumerate() {
                    let mut point_j = local[j][s].expect("common sample");
                    if flags[m] {
                        point_j += shell_offset(rng, cfg.outlier_min_dist, cfg.outlier_max_dist);
                    }
                    fs.keypoint_matches.push(KeypointMatch {
                        frame_i: i,
                        frame_j: j,
                        point_i: local[i][s].expect("common sample"),
                        point_j,
                    });
                }
                truth.keypoint_outliers.extend(flags);
            }
        }
    }
    fs.ground_truth = Some(cams.to_vec());
    Ok(SynthScene { frame_set: fs, truth })
}

/// Radius used for overlap measurement, meters.
pub const OVERLAP_RADIUS: f64 = 0.01;

/// Percentage of points in `a` with a neighbor in `b` within `radius`.
pub fn overlap(a: &[Vector3<f64>], b: &[Vector3<f64>], radius: f64) -> Result<f64, SynthError> {
    if a.is_empty() || b.is_empty() {
        return Err(SynthError::EmptyCloud);
    }
    let grid = VoxelGrid::new(b, radius);
    let hits = a.iter().filter(|p| grid.has_neighbor_within(p, radius)).count();
    Ok(100.0 * hits as f64 / a.len() as f64)
}

/// Overlap range of a pair-suite bucket, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapBucket {
    AtMost(f64),
    /// Open interval.
    Between(f64, f64),
    AtLeast(f64),
}

impl OverlapBucket {
    /// `≤10`, `(10, 30)` and `≥30`.
    pub fn standard() -> Vec<OverlapBucket> {
        vec![OverlapBucket::AtMost(10.0), OverlapBucket::Between(10.0, 30.0), OverlapBucket::AtLeast(30.0)]
    }

    pub fn contains(&self, v: f64) -> bool {
        match *self {
            OverlapBucket::AtMost(hi) => v <= hi,
            OverlapBucket::Between(lo, hi) => v > lo && v < hi,
            OverlapBucket::AtLeast(lo) => v >= lo,
        }
    }
}

/// Overlap at or below which a pair counts as low overlap.
pub const LOW_OVERLAP: f64 = 10.0;

/// Minimum visible samples of the shared object in each frame of a suite pair.
pub const SUITE_MIN_OBJECT_POINTS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SuitePair {
    pub bucket: usize,
    pub overlap: f64,
    pub keypoints_zeroed: bool,
    pub scene: SynthScene,
}

/// Two-frame scenes whose measured overlap falls in each bucket.
///
/// Both cameras look at a non-symmetric object at the room center from random
/// positions around it; pairs are kept when the overlap lands in a bucket
/// that still needs pairs. Low-overlap pairs lose their keypoints with
/// probability 0.5.
pub fn make_pair_suite(
    buckets: &[OverlapBucket],
    n_per_bucket: usize,
    cfg: &SynthConfig,
) -> Result<Vec<SuitePair>, SynthError> {
    cfg.validate()?;
    if n_per_bucket == 0 || buckets.is_empty() {
        return Ok(Vec::new());
    }
    let mut base = cfg.clone();
    base.num_frames = 2;
    base.num_objects = cfg.num_objects.max(1);
    if base.spec(0).symmetry.is_symmetric() {
        let first = base
            .object_specs
            .iter()
            .position(|s| !s.symmetry.is_symmetric())
            .ok_or_else(|| SynthError::InvalidConfig("pair suite needs a non-symmetric object spec".into()))?;
        base.object_specs.rotate_left(first);
    }

    let max_attempts = 400 * n_per_bucket * buckets.len();
    let mut filled: Vec<Vec<SuitePair>> = vec![Vec::new(); buckets.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    for _ in 0..max_attempts {
        if filled.iter().all(|b| b.len() >= n_per_bucket) {
            break;
        }
        let a0 = rng.random_range(0.0..2.0 * PI);
        let a1 = a0 + rng.random_range(-PI..PI);
        let eye = |a: f64, r: f64, h: f64| Vector3::new(r * a.sin(), h, -r * a.cos());
        let jitter =
            Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let cams = [
            look_at(eye(a0, rng.random_range(1.6..2.6), rng.random_range(0.2..0.8)), jitter),
            look_at(eye(a1, rng.random_range(1.6..2.6), rng.random_range(0.2..0.8)), -jitter),
        ];
        let mut scene_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let objects = object_poses(&base, &mut scene_rng, true);
        let Ok(mut scene) = render(&base, &cams, &objects, &mut scene_rng) else { continue };
        let shared = (0..2).all(|f| {
            scene
                .frame_set
                .observations
                .iter()
                .zip(&scene.truth.observation_objects)
                .any(|(obs, &o)| o == 0 && obs.frame == f && obs.noc_points.len() >= SUITE_MIN_OBJECT_POINTS)
        });
        if !shared {
            continue;
        }
        let v = &scene.truth.visible_world;
        let Ok(ov) = overlap(&v[0], &v[1], OVERLAP_RADIUS) else { continue };
        let Some(b) = (0..buckets.len()).find(|&b| buckets[b].contains(ov) && filled[b].len() < n_per_bucket) else {
            continue;
        };
        let zero = ov <= LOW_OVERLAP && rng.random::<bool>();
        if zero {
            scene.frame_set.keypoint_matches.clear();
            scene.truth.keypoint_outliers.clear();
        }
        filled[b].push(SuitePair { bucket: b, overlap: ov, keypoints_zeroed: zero, scene });
    }
    if let Some(b) = filled.iter().position(|f| f.len() < n_per_bucket) {
        return Err(SynthError::BucketUnreachable(b, max_attempts));
    }
    Ok(filled.into_iter().flatten().collect())
}
