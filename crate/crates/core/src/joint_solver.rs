//! Joint camera/object pose optimization.
//!
//! Minimizes `w_c·E_c + w_o·E_o` over camera poses `T_1..T_{K-1}` (frame 0 is
//! pinned to identity) and 9-DoF object poses `T̄_o`, where
//!
//! * `E_c` sums `‖T_i·p_i − T_j·p_j‖²` over keypoint matches, and
//! * `E_o` sums `‖T_c·d − T̄_o·n‖²` over NOC-depth pairs `(n, d)` of every
//!   object view, with `T̄_o·n = R̄_o·(n ⊙ s̄_o) + t̄_o`.
//!
//! Each keypoint block and each object view is normalized by its
//! correspondence count. Object scales are optimized as logarithms.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_rotation, cast_vec, rotation_derivatives, rotation_from_euler, ObjectPose, RigidPose};
use crate::matching::{match_pair, MatchConfig, MatchOutcome, ObjectTrack, MIN_NOC_PAIRS};
use crate::observations::{FrameSet, ObservationError};
use crate::procrustes::{icp_refine, kabsch_filter, FilterConfig};
use crate::scalar::Real;

/// Minimum keypoint matches a frame pair must keep after filtering.
pub const MIN_KEYPOINT_PAIRS: usize = 5;

/// Lower bound on optimized object scales.
pub const MIN_SCALE: f64 = 1e-3;

const LAMBDA_INIT: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e10;
const LAMBDA_MIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error("no keypoint or object block survives filtering")]
    NoBlocks,
    #[error("frames {0:?} are not connected to frame 0 by any constraint")]
    UnderConstrained(Vec<usize>),
    #[error("normal equations stay singular after damping; under-constrained: {}", .0.join(", "))]
    Singular(Vec<String>),
    #[error("pair registration needs exactly 2 frames, got {0}")]
    NotAPair(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub w_c: f64,
    pub w_o: f64,
    pub residual_prune: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub step_halvings: usize,
    pub object_filter: FilterConfig,
    pub keypoint_filter: FilterConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            w_o: 1.0,
            residual_prune: 0.15,
            max_iterations: 50,
            convergence_tol: 1e-9,
            step_halvings: 8,
            object_filter: FilterConfig::pairwise().with_min_pairs(MIN_NOC_PAIRS),
            keypoint_filter: FilterConfig::pairwise().with_min_pairs(MIN_KEYPOINT_PAIRS),
        }
    }
}

impl SolverConfig {
    /// Both filters set to `threshold`, keeping their minimum counts.
    pub fn with_filter_threshold(self, threshold: f64) -> Self {
        Self {
            object_filter: FilterConfig { distance_threshold: threshold, ..self.object_filter },
            keypoint_filter: FilterConfig { distance_threshold: threshold, ..self.keypoint_filter },
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidConfig(m));
        if !(self.w_c >= 0.0 && self.w_o >= 0.0) || self.w_c + self.w_o <= 0.0 {
            return bad(format!("weights must be >= 0 and not both 0 (w_c={}, w_o={})", self.w_c, self.w_o));
        }
        if !(self.residual_prune > 0.0) {
            return bad(format!("residual_prune must be positive, got {}", self.residual_prune));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad(format!("convergence_tol must be >= 0, got {}", self.convergence_tol));
        }
        for f in [&self.object_filter, &self.keypoint_filter] {
            f.validate().map_err(|e| SolverError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// Filtered keypoint matches between frames `frame_i < frame_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointBlock<T: Real> {
    pub frame_i: usize,
    pub frame_j: usize,
    pub points_i: Vec<Vector3<T>>,
    pub points_j: Vec<Vector3<T>>,
    pub filtered_out: usize,
    /// Filter estimate of `T_i⁻¹·T_j`.
    pub relative: RigidPose<T>,
}

/// Filtered NOC-depth pairs of one object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView<T: Real> {
    pub frame: usize,
    pub detection_id: u32,
    pub noc: Vec<Vector3<T>>,
    pub depth: Vec<Vector3<T>>,
    pub filtered_out: usize,
    pub scale_estimate: Vector3<T>,
    /// Filter estimate of the object-to-camera transform on `noc ⊙ scale_estimate`.
    pub local: RigidPose<T>,
}

/// All views of one tracked object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectBlock<T: Real> {
    pub track_id: usize,
    pub class_label: u32,
    pub views: Vec<ObjectView<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DroppedBlock {
    Keypoints { frame_i: usize, frame_j: usize, reason: String },
    ObjectView { track_id: usize, frame: usize, reason: String },
    Object { track_id: usize, views: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationProblem<T: Real> {
    pub num_frames: usize,
    pub keypoint_blocks: Vec<KeypointBlock<T>>,
    pub object_blocks: Vec<ObjectBlock<T>>,
    pub config: SolverConfig,
    pub initial_cameras: Vec<RigidPose<T>>,
    pub initial_objects: Vec<ObjectPose<T>>,
    pub dropped: Vec<DroppedBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockRef {
    Keypoints { frame_i: usize, frame_j: usize },
    ObjectView { object: usize, frame: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats<T: Real> {
    pub block: BlockRef,
    pub correspondences: usize,
    pub active: usize,
    /// RMS residual norm over active correspondences at the returned poses.
    pub rms: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No damped step lowered the cost.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T: Real> {
    pub camera_poses: Vec<RigidPose<T>>,
    pub object_poses: Vec<ObjectPose<T>>,
    pub iterations: usize,
    pub initial_cost: T,
    pub final_cost: T,
    /// Cost after pruning at the start of each iteration, then the final cost.
    pub cost_history: Vec<T>,
    pub block_stats: Vec<BlockStats<T>>,
    pub pruned_residuals: usize,
    pub termination: Termination,
}

fn cast_points<T: Real>(pts: &[Vector3<f64>]) -> Vec<Vector3<T>> {
    pts.iter().map(cast_vec).collect()
}

/// Filters every block, drops those below the minimum counts and seeds the
/// variables.
///
/// Cameras are chained outward from frame 0 over keypoint links first, then
/// object links (relative pose `L_a·L_b⁻¹` between two views of one object).
/// Each object starts at `T_c·L_c` of its first view with that view's scale
/// estimate. A zero weight removes the corresponding blocks entirely.
pub fn build_problem<T: Real>(
    fs: &FrameSet,
    tracks: &[ObjectTrack],
    cfg: &SolverConfig,
) -> Result<RegistrationProblem<T>, SolverError> {
    cfg.validate()?;
    fs.validate()?;
    let k = fs.num_frames();
    let mut dropped = Vec::new();

    let mut keypoint_blocks = Vec::new();
    if cfg.w_c > 0.0 {
        for g in fs.keypoint_groups() {
            let (pi, pj): (Vec<_>, Vec<_>) = g.pairs.iter().copied().unzip();
            let (pi, pj) = (cast_points::<T>(&pi), cast_points::<T>(&pj));
            match kabsch_filter(&pj, &pi, &cfg.keypoint_filter) {
                Ok(res) => {
                    let keep = &res.inlier_flags;
                    let pick = |v: &[Vector3<T>]| -> Vec<Vector3<T>> {
                        v.iter().zip(keep).filter(|(_, f)| **f).map(|(p, _)| *p).collect()
                    };
                    keypoint_blocks.push(KeypointBlock {
                        frame_i: g.lo,
                        frame_j: g.hi,
                        points_i: pick(&pi),
                        points_j: pick(&pj),
                        filtered_out: pi.len() - res.inlier_count(),
                        relative: res.pose,
                    });
                }
                Err(e) => dropped.push(DroppedBlock::Keypoints { frame_i: g.lo, frame_j: g.hi, reason: e.to_string() }),
            }
        }
    }

    let mut object_blocks = Vec::new();
    if cfg.w_o > 0.0 {
        for track in tracks {
            let mut views = Vec::new();
            for &(frame, det) in &track.members {
                let Some(obs) = fs.observation(frame, det) else {
                    dropped.push(DroppedBlock::ObjectView {
                        track_id: track.track_id,
                        frame,
                        reason: format!("no observation with detection id {det}"),
                    });
                    continue;
                };
                let noc = cast_points::<T>(&obs.noc_points);
                let depth = cast_points::<T>(&obs.depth_points);
                let scale: Vector3<T> = cast_vec(&obs.scale_estimate);
                let scaled: Vec<Vector3<T>> = noc.iter().map(|p| p.component_mul(&scale)).collect();
                match kabsch_filter(&scaled, &depth, &cfg.object_filter) {
                    Ok(res) => {
                        let keep = &res.inlier_flags;
                        let pick = |v: &[Vector3<T>]| -> Vec<Vector3<T>> {
                            v.iter().zip(keep).filter(|(_, f)| **f).map(|(p, _)| *p).collect()
                        };
                        views.push(ObjectView {
                            frame,
                            detection_id: det,
                            noc: pick(&noc),
                            depth: pick(&depth),
                            filtered_out: noc.len() - res.inlier_count(),
                            scale_estimate: scale,
                            local: res.pose,
                        });
                    }
                    Err(e) => dropped.push(DroppedBlock::ObjectView {
                        track_id: track.track_id,
                        frame,
                        reason: e.to_string(),
                    }),
                }
            }
            views.sort_by_key(|v| v.frame);
            if views.len() >= 2 {
                object_blocks.push(ObjectBlock { track_id: track.track_id, class_label: track.class_label, views });
            } else {
                dropped.push(DroppedBlock::Object { track_id: track.track_id, views: views.len() });
            }
        }
    }

    if keypoint_blocks.is_empty() && object_blocks.is_empty() {
        return Err(SolverError::NoBlocks);
    }

    // Links are `(neighbor, T_self⁻¹·T_neighbor)`.
    let mut links: Vec<Vec<(usize, RigidPose<T>)>> = vec![Vec::new(); k];
    for b in &keypoint_blocks {
        links[b.frame_i].push((b.frame_j, b.relative));
        links[b.frame_j].push((b.frame_i, b.relative.inverse()));
    }
    for ob in &object_blocks {
        for a in &ob.views {
            for b in &ob.views {
                if a.frame != b.frame {
                    links[a.frame].push((b.frame, a.local.compose(&b.local.inverse())));
                }
            }
        }
    }
    let mut cams: Vec<Option<RigidPose<T>>> = vec![None; k];
    cams[0] = Some(RigidPose::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(f) = queue.pop_front() {
        let base = cams[f].expect("queued frames are seeded");
        for (n, rel) in &links[f] {
            if cams[*n].is_none() {
                cams[*n] = Some(base.compose(rel));
                queue.push_back(*n);
            }
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&f| cams[f].is_none()).collect();
    if !missing.is_empty() {
        return Err(SolverError::UnderConstrained(missing));
    }
    let initial_cameras: Vec<RigidPose<T>> = cams.into_iter().flatten().collect();
    let initial_objects = object_blocks
        .iter()
        .map(|ob| {
            let v = &ob.views[0];
            ObjectPose::from_rigid(&initial_cameras[v.frame].compose(&v.local), v.scale_estimate)
        })
        .collect();

    Ok(RegistrationProblem {
        num_frames: k,
        keypoint_blocks,
        object_blocks,
        config: *cfg,
        initial_cameras,
        initial_objects,
        dropped,
    })
}

/// Raw residuals `T_c·d − T̄_o·n` of every view of a block, three entries per
/// correspondence.
pub fn object_residuals<T: Real>(
    cameras: &[RigidPose<T>],
    objects: &[ObjectPose<T>],
    object: usize,
    block: &ObjectBlock<T>,
) -> DVector<T> {
    let o = &objects[object];
    let ro = o.rotation();
    let mut out = Vec::new();
    for v in &block.views {
        let c = &cameras[v.frame];
        let rc = c.rotation();
        for (n, d) in v.noc.iter().zip(&v.depth) {
            let r = rc * d + c.translation - (ro * n.component_mul(&o.scale) + o.translation);
            out.extend_from_slice(r.as_slice());
        }
    }
    DVector::from_vec(out)
}

/// Raw residuals `T_i·p_i − T_j·p_j`, three entries per match.
pub fn keypoint_residuals<T: Real>(cameras: &[RigidPose<T>], block: &KeypointBlock<T>) -> DVector<T> {
    let (ci, cj) = (&cameras[block.frame_i], &cameras[block.frame_j]);
    let (ri, rj) = (ci.rotation(), cj.rotation());
    let mut out = Vec::with_capacity(3 * block.points_i.len());
    for (pi, pj) in block.points_i.iter().zip(&block.points_j) {
        let r = ri * pi + ci.translation - (rj * pj + cj.translation);
        out.extend_from_slice(r.as_slice());
    }
    DVector::from_vec(out)
}

/// Parameter vector layout: `[γ, t]` per free camera, then `[γ, t, ln s]` per
/// object.
struct Layout {
    frames: usize,
    objects: usize,
}

impl Layout {
    fn camera(&self, frame: usize) -> Option<usize> {
        (frame > 0).then(|| 6 * (frame - 1))
    }

    fn object(&self, o: usize) -> usize {
        6 * (self.frames - 1) + 9 * o
    }

    fn dim(&self) -> usize {
        6 * (self.frames - 1) + 9 * self.objects
    }

    fn describe(&self, col: usize) -> String {
        let cam_cols = 6 * (self.frames - 1);
        if col < cam_cols {
            format!("camera {} parameter {}", col / 6 + 1, col % 6)
        } else {
            format!("object {} parameter {}", (col - cam_cols) / 9, (col - cam_cols) % 9)
        }
    }
}

#[derive(Clone)]
struct State<T: Real> {
    cameras: Vec<RigidPose<T>>,
    objects: Vec<ObjectPose<T>>,
}

impl<T: Real> State<T> {
    fn to_vector(&self, layout: &Layout) -> DVector<T> {
        let mut x = DVector::zeros(layout.dim());
        for (f, c) in self.cameras.iter().enumerate() {
            if let Some(i) = layout.camera(f) {
                x.fixed_rows_mut::<3>(i).copy_from(&c.angles);
                x.fixed_rows_mut::<3>(i + 3).copy_from(&c.translation);
            }
        }
        for (o, p) in self.objects.iter().enumerate() {
            let i = layout.object(o);
            x.fixed_rows_mut::<3>(i).copy_from(&p.angles);
            x.fixed_rows_mut::<3>(i + 3).copy_from(&p.translation);
            x.fixed_rows_mut::<3>(i + 6).copy_from(&p.scale.map(|s| s.ln()));
        }
        x
    }

    fn from_vector(layout: &Layout, x: &DVector<T>) -> Self {
        let v3 = |i: usize| Vector3::new(x[i], x[i + 1], x[i + 2]);
        let min_log = T::lit(MIN_SCALE.ln());
        let cameras = (0..layout.frames)
            .map(|f| match layout.camera(f) {
                Some(i) => RigidPose::new(v3(i), v3(i + 3)),
                None => RigidPose::identity(),
            })
            .collect();
        let objects = (0..layout.objects)
            .map(|o| {
                let i = layout.object(o);
                ObjectPose::new(v3(i), v3(i + 3), v3(i + 6).map(|l| l.max(min_log).exp()))
            })
            .collect();
        Self { cameras, objects }
    }
}

/// Per-correspondence activity flags, laid out like the blocks.
#[derive(Clone)]
struct ActiveSet {
    keypoints: Vec<Vec<bool>>,
    objects: Vec<Vec<Vec<bool>>>,
}

impl ActiveSet {
    fn all<T: Real>(p: &RegistrationProblem<T>) -> Self {
        Self {
            keypoints: p.keypoint_blocks.iter().map(|b| vec![true; b.points_i.len()]).collect(),
            objects: p
                .object_blocks
                .iter()
                .map(|b| b.views.iter().map(|v| vec![true; v.noc.len()]).collect())
                .collect(),
        }
    }

    fn count(&self) -> usize {
        let k: usize = self.keypoints.iter().flatten().filter(|a| **a).count();
        let o: usize = self.objects.iter().flatten().flatten().filter(|a| **a).count();
        k + o
    }
}

/// One 3-vector residual with its weight and the variable blocks it touches.
enum Term<T: Real> {
    Keypoint { sqrt_w: T, frame_i: usize, frame_j: usize, p_i: Vector3<T>, p_j: Vector3<T> },
    Object { sqrt_w: T, frame: usize, object: usize, noc: Vector3<T>, depth: Vector3<T> },
}

fn terms<T: Real>(p: &RegistrationProblem<T>, active: &ActiveSet) -> Vec<Term<T>> {
    let mut out = Vec::new();
    let w_c = T::lit(p.config.w_c);
    let w_o = T::lit(p.config.w_o);
    for (b, blk) in p.keypoint_blocks.iter().enumerate() {
        let sqrt_w = (w_c / T::from_count(blk.points_i.len())).sqrt();
        for (m, (pi, pj)) in blk.points_i.iter().zip(&blk.points_j).enumerate() {
            if active.keypoints[b][m] {
                out.push(Term::Keypoint { sqrt_w, frame_i: blk.frame_i, frame_j: blk.frame_j, p_i: *pi, p_j: *pj });
            }
        }
    }
    for (o, blk) in p.object_blocks.iter().enumerate() {
        for (v, view) in blk.views.iter().enumerate() {
            let sqrt_w = (w_o / T::from_count(view.noc.len())).sqrt();
            for (m, (n, d)) in view.noc.iter().zip(&view.depth).enumerate() {
                if active.objects[o][v][m] {
                    out.push(Term::Object { sqrt_w, frame: view.frame, object: o, noc: *n, depth: *d });
                }
            }
        }
    }
    out
}

struct Cache<T: Real> {
    rot: Vec<Matrix3<T>>,
    drot: Vec<[Matrix3<T>; 3]>,
    obj_rot: Vec<Matrix3<T>>,
    obj_drot: Vec<[Matrix3<T>; 3]>,
}

impl<T: Real> Cache<T> {
    fn new(s: &State<T>, with_derivatives: bool) -> Self {
        let d = |a: &Vector3<T>| if with_derivatives { rotation_derivatives(a) } else { [Matrix3::zeros(); 3] };
        Self {
            rot: s.cameras.iter().map(|c| rotation_from_euler(&c.angles)).collect(),
            drot: s.cameras.iter().map(|c| d(&c.angles)).collect(),
            obj_rot: s.objects.iter().map(|o| rotation_from_euler(&o.angles)).collect(),
            obj_drot: s.objects.iter().map(|o| d(&o.angles)).collect(),
        }
    }
}

impl<T: Real> Term<T> {
    /// Unweighted residual.
    fn residual(&self, s: &State<T>, c: &Cache<T>) -> Vector3<T> {
        match self {
            Term::Keypoint { frame_i, frame_j, p_i, p_j, .. } => {
                c.rot[*frame_i] * p_i + s.cameras[*frame_i].translation
                    - (c.rot[*frame_j] * p_j + s.cameras[*frame_j].translation)
            }
            Term::Object { frame, object, noc, depth, .. } => {
                let o = &s.objects[*object];
                c.rot[*frame] * depth + s.cameras[*frame].translation
                    - (c.obj_rot[*object] * noc.component_mul(&o.scale) + o.translation)
            }
        }
    }

    fn sqrt_w(&self) -> T {
        match self {
            Term::Keypoint { sqrt_w, .. } | Term::Object { sqrt_w, .. } => *sqrt_w,
        }
    }

    /// Writes the weighted 3×n Jacobian rows starting at `row`.
    fn jacobian(&self, s: &State<T>, c: &Cache<T>, layout: &Layout, j: &mut DMatrix<T>, row: usize) {
        let w = self.sqrt_w();
        let camera = |frame: usize, p: &Vector3<T>, sign: T, j: &mut DMatrix<T>| {
            if let Some(col) = layout.camera(frame) {
                for k in 0..3 {
                    let d = c.drot[frame][k] * p * (sign * w);
                    j.fixed_view_mut::<3, 1>(row, col + k).copy_from(&d);
                    j[(row + k, col + 3 + k)] = sign * w;
                }
            }
        };
        match self {
            Term::Keypoint { frame_i, frame_j, p_i, p_j, .. } => {
                camera(*frame_i, p_i, T::one(), j);
                camera(*frame_j, p_j, -T::one(), j);
            }
            Term::Object { frame, object, noc, depth, .. } => {
                camera(*frame, depth, T::one(), j);
                let col = layout.object(*object);
                let o = &s.objects[*object];
                let scaled = noc.component_mul(&o.scale);
                for k in 0..3 {
                    let d = c.obj_drot[*object][k] * scaled * (-w);
                    j.fixed_view_mut::<3, 1>(row, col + k).copy_from(&d);
                    j[(row + k, col + 3 + k)] = -w;
                    let ds = c.obj_rot[*object].column(k) * (noc[k] * o.scale[k] * (-w));
                    j.fixed_view_mut::<3, 1>(row, col + 6 + k).copy_from(&ds);
                }
            }
        }
    }
}

fn weighted_residuals<T: Real>(terms: &[Term<T>], s: &State<T>) -> DVector<T> {
    let c = Cache::new(s, false);
    let mut r = DVector::zeros(3 * terms.len());
    for (i, t) in terms.iter().enumerate() {
        r.fixed_rows_mut::<3>(3 * i).copy_from(&(t.residual(s, &c) * t.sqrt_w()));
    }
    r
}

fn jacobian<T: Real>(terms: &[Term<T>], s: &State<T>, layout: &Layout) -> DMatrix<T> {
    let c = Cache::new(s, true);
    let mut j = DMatrix::zeros(3 * terms.len(), layout.dim());
    for (i, t) in terms.iter().enumerate() {
        t.jacobian(s, &c, layout, &mut j, 3 * i);
    }
    j
}

fn cost<T: Real>(terms: &[Term<T>], s: &State<T>) -> T {
    weighted_residuals(terms, s).norm_squared()
}

/// Deactivates every correspondence whose residual norm exceeds `limit`.
fn prune<T: Real>(p: &RegistrationProblem<T>, s: &State<T>, active: &mut ActiveSet, limit: T) -> usize {
    let mut removed = 0;
    for (b, blk) in p.keypoint_blocks.iter().enumerate() {
        let r = keypoint_residuals(&s.cameras, blk);
        for (m, a) in active.keypoints[b].iter_mut().enumerate() {
            if *a && r.fixed_rows::<3>(3 * m).norm() > limit {
                *a = false;
                removed += 1;
            }
        }
    }
    for (o, blk) in p.object_blocks.iter().enumerate() {
        let r = object_residuals(&s.cameras, &s.objects, o, blk);
        let mut offset = 0;
        for (v, view) in blk.views.iter().enumerate() {
            for m in 0..view.noc.len() {
                let a = &mut active.objects[o][v][m];
                if *a && r.fixed_rows::<3>(3 * (offset + m)).norm() > limit {
                    *a = false;
                    removed += 1;
                }
            }
            offset += view.noc.len();
        }
    }
    removed
}

fn block_stats<T: Real>(p: &RegistrationProblem<T>, s: &State<T>, active: &ActiveSet) -> Vec<BlockStats<T>> {
    let summarize = |r: &DVector<T>, flags: &[bool], offset: usize| {
        let mut sq = T::zero();
        let mut n = 0;
        for (m, a) in flags.iter().enumerate() {
            if *a {
                sq += r.fixed_rows::<3>(3 * (offset + m)).norm_squared();
                n += 1;
            }
        }
        let rms = if n > 0 { (sq / T::from_count(n)).sqrt() } else { T::zero() };
        (n, rms)
    };
    let mut out = Vec::new();
    for (b, blk) in p.keypoint_blocks.iter().enumerate() {
        let r = keypoint_residuals(&s.cameras, blk);
        let (n, rms) = summarize(&r, &active.keypoints[b], 0);
        out.push(BlockStats {
            block: BlockRef::Keypoints { frame_i: blk.frame_i, frame_j: blk.frame_j },
            correspondences: blk.points_i.len(),
            active: n,
            rms,
        });
    }
    for (o, blk) in p.object_blocks.iter().enumerate() {
        let r = object_residuals(&s.cameras, &s.objects, o, blk);
        let mut offset = 0;
        for (v, view) in blk.views.iter().enumerate() {
            let (n, rms) = summarize(&r, &active.objects[o][v], offset);
            out.push(BlockStats {
                block: BlockRef::ObjectView { object: o, frame: view.frame },
                correspondences: view.noc.len(),
                active: n,
                rms,
            });
            offset += view.noc.len();
        }
    }
    out
}

/// Damped Gauss-Newton from the problem's initial poses.
///
/// Each iteration first prunes correspondences whose residual exceeds
/// `residual_prune` (they stay pruned), then solves
/// `(JᵀJ + λI)·δ = −Jᵀr`. A step is accepted once some halving of it lowers
/// the cost; otherwise λ grows tenfold and the step is recomputed. λ shrinks
/// tenfold after each accepted step.
pub fn gauss_newton_solve<T: Real>(p: &RegistrationProblem<T>) -> Result<SolveReport<T>, SolverError> {
    p.config.validate()?;
    let layout = Layout { frames: p.num_frames, objects: p.object_blocks.len() };
    let mut state = State { cameras: p.initial_cameras.clone(), objects: p.initial_objects.clone() };
    // Round-trip once so clamping applies to the seed too.
    let mut x = state.to_vector(&layout);
    state = State::from_vector(&layout, &x);

    let mut active = ActiveSet::all(p);
    let limit = T::lit(p.config.residual_prune);
    let tol = T::lit(p.config.convergence_tol);
    // Cost at which the RMS residual reaches rounding level.
    let blocks = T::lit(p.config.w_c) * T::from_count(p.keypoint_blocks.len())
        + T::lit(p.config.w_o) * T::from_count(p.object_blocks.iter().map(|b| b.views.len()).sum::<usize>());
    let tiny = T::default_epsilon() * T::default_epsilon() * T::lit(1e4) * blocks;
    let initial_cost = cost(&terms(p, &active), &state);
    let mut cost_history = Vec::new();
    let mut lambda = LAMBDA_INIT;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < p.config.max_iterations {
        prune(p, &state, &mut active, limit);
        let ts = terms(p, &active);
        let current = cost(&ts, &state);
        cost_history.push(current);
        if current <= tiny {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;

        let r = weighted_residuals(&ts, &state);
        let j = jacobian(&ts, &state, &layout);
        let jt = j.transpose();
        let h = &jt * &j;
        let g = &jt * &r;

        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            let mut damped = h.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += T::lit(lambda);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let mut alpha = T::one();
            for _ in 0..=p.config.step_halvings {
                let cand_x = &x + &delta * alpha;
                let cand = State::from_vector(&layout, &cand_x);
                let c = cost(&ts, &cand);
                if c < current {
                    accepted = Some((cand_x, cand, c));
                    break;
                }
                alpha *= T::lit(0.5);
            }
            if accepted.is_some() {
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                break;
            }
            lambda *= 10.0;
        }

        let Some((nx, ns, new_cost)) = accepted else {
            if h.diagonal().iter().any(|d| *d <= T::zero()) && current > tiny.sqrt() {
                let names = (0..layout.dim()).filter(|&c| h[(c, c)] <= T::zero()).map(|c| layout.describe(c)).collect();
                return Err(SolverError::Singular(names));
            }
            termination = Termination::Stalled;
            break;
        };
        x = nx;
        state = ns;
        if (current - new_cost) <= tol * current {
            termination = Termination::Converged;
            break;
        }
    }

    let final_cost = cost(&terms(p, &active), &state);
    if cost_history.last() != Some(&final_cost) {
        cost_history.push(final_cost);
    }
    let total: usize = ActiveSet::all(p).count();
    Ok(SolveReport {
        block_stats: block_stats(p, &state, &active),
        pruned_residuals: total - active.count(),
        camera_poses: state.cameras,
        object_poses: state.objects,
        iterations,
        initial_cost,
        final_cost,
        cost_history,
        termination,
    })
}

/// `(R_axis(h) − I)·v`, using `cos h − 1 = −2 sin²(h/2)`.
fn axis_step<T: Real>(axis: usize, h: T, v: &Vector3<T>) -> Vector3<T> {
    let s = h.sin();
    let half = (h * T::lit(0.5)).sin();
    let cm = -(half * half) * T::lit(2.0);
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut out = Vector3::zeros();
    out[a] = cm * v[a] - s * v[b];
    out[b] = s * v[a] + cm * v[b];
    out
}

/// `R(γ + h·e_k)·q − R(γ)·q` without subtracting two rotated points.
fn rotation_step<T: Real>(angles: &Vector3<T>, k: usize, h: T, q: &Vector3<T>) -> Vector3<T> {
    let (rx, _) = axis_rotation(0, angles.x);
    let (ry, _) = axis_rotation(1, angles.y);
    let (rz, _) = axis_rotation(2, angles.z);
    match k {
        0 => rz * ry * rx * axis_step(0, h, q),
        1 => rz * ry * axis_step(1, h, &(rx * q)),
        _ => rz * axis_step(2, h, &(ry * rx * q)),
    }
}

/// Change of `pose(q)` when pose parameter `k` (`[γ, t]`) moves by `h`.
fn pose_step<T: Real>(angles: &Vector3<T>, k: usize, h: T, q: &Vector3<T>) -> Vector3<T> {
    if k < 3 {
        rotation_step(angles, k, h, q)
    } else {
        let mut d = Vector3::zeros();
        d[k - 3] = h;
        d
    }
}

impl<T: Real> Term<T> {
    /// Unweighted `r(x + h·e_col) − r(x)`, evaluated term by term so the
    /// difference does not cancel against the full residual.
    fn residual_step(&self, s: &State<T>, layout: &Layout, col: usize, h: T) -> Vector3<T> {
        let cam_cols = 6 * (layout.frames - 1);
        let camera = |frame: usize, q: &Vector3<T>| match layout.camera(frame) {
            Some(c) if (c..c + 6).contains(&col) => pose_step(&s.cameras[frame].angles, col - c, h, q),
            _ => Vector3::zeros(),
        };
        match self {
            Term::Keypoint { frame_i, frame_j, p_i, p_j, .. } => camera(*frame_i, p_i) - camera(*frame_j, p_j),
            Term::Object { frame, object, noc, depth, .. } => {
                let mut d = camera(*frame, depth);
                if col >= cam_cols && (col - cam_cols) / 9 == *object {
                    let k = (col - cam_cols) % 9;
                    let o = &s.objects[*object];
                    if k < 6 {
                        d -= pose_step(&o.angles, k, h, &noc.component_mul(&o.scale));
                    } else {
                        let a = k - 6;
                        let min_log = T::lit(MIN_SCALE.ln());
                        let l = o.scale[a].ln();
                        let ds = if l + h >= min_log {
                            o.scale[a] * h.exp_m1()
                        } else {
                            (l + h).max(min_log).exp() - o.scale[a]
                        };
                        d -= rotation_from_euler(&o.angles).column(a) * (noc[a] * ds);
                    }
                }
                d
            }
        }
    }
}

/// Largest relative difference between the analytic Jacobian and central
/// differences (step 1e-6), over entries whose magnitude exceeds 1e-8. All
/// correspondences are included. Each residual difference is evaluated
/// directly, so entries near the magnitude floor are not swamped by
/// cancellation in meter-scale coordinates.
pub fn numeric_jacobian_check<T: Real>(
    p: &RegistrationProblem<T>,
    cameras: &[RigidPose<T>],
    objects: &[ObjectPose<T>],
) -> T {
    let layout = Layout { frames: p.num_frames, objects: p.object_blocks.len() };
    let state = State { cameras: cameras.to_vec(), objects: objects.to_vec() };
    let ts = terms(p, &ActiveSet::all(p));
    let analytic = jacobian(&ts, &state, &layout);
    let h = T::lit(1e-6);
    let floor = T::lit(1e-8);
    let mut worst = T::zero();
    for col in 0..layout.dim() {
        for (i, t) in ts.iter().enumerate() {
            let diff = t.residual_step(&state, &layout, col, h) - t.residual_step(&state, &layout, col, -h);
            let num = diff * (t.sqrt_w() / (h + h));
            for k in 0..3 {
                let ana = analytic[(3 * i + k, col)];
                let mag = num[k].abs().max(ana.abs());
                if mag > floor {
                    worst = worst.max((num[k] - ana).abs() / mag);
                }
            }
        }
    }
    worst
}

/// Stage switches for [`register_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    pub icp: bool,
    pub use_objects: bool,
    pub use_keypoints: bool,
    pub icp_max_iterations: usize,
    /// ICP association radius; `residual_prune` when unset.
    pub icp_max_corr_dist: Option<f64>,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { icp: true, use_objects: true, use_keypoints: true, icp_max_iterations: 30, icp_max_corr_dist: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum PairStatus {
    Registered,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReport<T: Real> {
    pub status: PairStatus,
    /// `T_0⁻¹·T_1`, mapping frame-1 points into frame 0.
    pub relative_pose: Option<RigidPose<T>>,
    pub solve: Option<SolveReport<T>>,
    pub matching: MatchOutcome,
    pub keypoints_present: bool,
    pub icp_rms: Option<T>,
}

impl<T: Real> PairReport<T> {
    fn failed(reason: String, matching: MatchOutcome, keypoints_present: bool) -> Self {
        Self {
            status: PairStatus::Failed(reason),
            relative_pose: None,
            solve: None,
            matching,
            keypoints_present,
            icp_rms: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == PairStatus::Registered
    }
}

/// Registers frame 1 against frame 0: object matching, joint solve and
/// optional ICP refinement on the frames' depth clouds.
///
/// Missing constraints give a `Failed` status; only malformed input is an
/// error.
pub fn register_pair<T: Real>(
    fs: &FrameSet,
    mcfg: &MatchConfig,
    scfg: &SolverConfig,
    opts: &PairOptions,
) -> Result<PairReport<T>, SolverError> {
    if fs.num_frames() != 2 {
        return Err(SolverError::NotAPair(fs.num_frames()));
    }
    scfg.validate()?;
    mcfg.validate().map_err(|e| SolverError::InvalidConfig(e.to_string()))?;
    fs.validate()?;

    let mut fs = fs.clone();
    if !opts.use_keypoints {
        fs.keypoint_matches.clear();
    }
    if !opts.use_objects {
        fs.observations.clear();
    }
    let keypoints_present = fs.keypoint_groups().iter().any(|g| {
        let (pi, pj): (Vec<_>, Vec<_>) = g.pairs.iter().copied().unzip();
        kabsch_filter(&pj, &pi, &scfg.keypoint_filter).is_ok()
    });

    let in_frame = |f: usize| fs.observations.iter().filter(|o| o.frame == f).cloned().collect::<Vec<_>>();
    let (obs_a, obs_b) = (in_frame(0), in_frame(1));
    let matching = match_pair(&obs_a, &obs_b, mcfg, keypoints_present);
    let tracks: Vec<ObjectTrack> = matching
        .matches
        .iter()
        .enumerate()
        .map(|(n, m)| ObjectTrack {
            track_id: n,
            members: vec![(0, obs_a[m.a].detection_id), (1, obs_b[m.b].detection_id)],
            class_label: obs_a[m.a].class_label,
        })
        .collect();
    if !keypoints_present && tracks.is_empty() {
        return Ok(PairReport::failed("no keypoint matches and no object matches".into(), matching, keypoints_present));
    }

    let problem = match build_problem::<T>(&fs, &tracks, scfg) {
        Ok(p) => p,
        Err(e @ (SolverError::NoBlocks | SolverError::UnderConstrained(_))) => {
            return Ok(PairReport::failed(e.to_string(), matching, keypoints_present));
        }
        Err(e) => return Err(e),
    };
    let solve = match gauss_newton_solve(&problem) {
        Ok(s) => s,
        Err(e @ SolverError::Singular(_)) => {
            return Ok(PairReport::failed(e.to_string(), matching, keypoints_present));
        }
        Err(e) => return Err(e),
    };

    let mut relative = solve.camera_poses[1];
    let mut icp_rms = None;
    if opts.icp {
        let source = cast_points::<T>(&fs.frame_cloud(1));
        let target = cast_points::<T>(&fs.frame_cloud(0));
        if let Ok(res) = icp_refine(
            &source,
            &target,
            &relative,
            T::lit(opts.icp_max_corr_dist.unwrap_or(scfg.residual_prune)),
            opts.icp_max_iterations,
        ) {
            if !res.no_op {
                relative = res.alignment.pose;
                icp_rms = Some(res.alignment.rms_residual);
            }
        }
    }

    Ok(PairReport {
        status: PairStatus::Registered,
        relative_pose: Some(relative),
        solve: Some(solve),
        matching,
        keypoints_present,
        icp_rms,
    })
}
