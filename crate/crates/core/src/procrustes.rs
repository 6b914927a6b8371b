//! Closed-form rigid alignment, iterative Kabsch outlier filtering and
//! point-to-point ICP.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle_between, RigidPose};
use crate::scalar::Real;
use crate::spatial::VoxelGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcrustesError {
    #[error("point sets differ in length ({source_len} vs {target_len})")]
    LengthMismatch { source_len: usize, target_len: usize },
    #[error("weights length {got} does not match {want} pairs")]
    WeightsMismatch { got: usize, want: usize },
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("empty point set")]
    Empty,
}

/// Pose, residual and per-pair inlier flags of an alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult<T: Real> {
    /// Maps source points onto target points.
    pub pose: RigidPose<T>,
    pub rms_residual: T,
    pub inlier_flags: Vec<bool>,
}

impl<T: Real> AlignmentResult<T> {
    pub fn inlier_count(&self) -> usize {
        self.inlier_flags.iter().filter(|f| **f).count()
    }
}

/// Kabsch filter parameters. Distances are meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub distance_threshold: f64,
    pub min_pairs: usize,
    pub max_rounds: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::pairwise()
    }
}

impl FilterConfig {
    /// Pairwise registration: 20 cm.
    pub fn pairwise() -> Self {
        Self { distance_threshold: 0.20, min_pairs: 3, max_rounds: 10 }
    }

    /// Consecutive frames of a sequence: 30 cm.
    pub fn odometry() -> Self {
        Self { distance_threshold: 0.30, ..Self::pairwise() }
    }

    /// Loop-closure candidates of a sequence: 15 cm.
    pub fn loop_closure() -> Self {
        Self { distance_threshold: 0.15, ..Self::pairwise() }
    }

    pub fn with_min_pairs(self, min_pairs: usize) -> Self {
        Self { min_pairs, ..self }
    }

    pub fn validate(&self) -> Result<(), ProcrustesError> {
        if !(self.distance_threshold > 0.0) || !self.distance_threshold.is_finite() {
            return Err(ProcrustesError::InvalidConfig(format!(
                "distance_threshold must be positive, got {}",
                self.distance_threshold
            )));
        }
        if self.min_pairs < 3 {
            return Err(ProcrustesError::InvalidConfig(format!(
                "min_pairs must be at least 3, got {}",
                self.min_pairs
            )));
        }
        Ok(())
    }
}

fn check_lengths<T>(source: &[T], target: &[T]) -> Result<(), ProcrustesError> {
    if source.len() != target.len() {
        return Err(ProcrustesError::LengthMismatch { source_len: source.len(), target_len: target.len() });
    }
    Ok(())
}

/// Weighted least-squares rigid transform mapping `source` onto `target`.
///
/// With `allow_rank_deficient` the det-corrected SVD solution is returned even
/// for collinear input (any minimizer is then acceptable to the caller).
pub(crate) fn solve_rigid<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: Option<&[T]>,
    allow_rank_deficient: bool,
) -> Result<(RigidPose<T>, T), ProcrustesError> {
    check_lengths(source, target)?;
    if let Some(w) = weights {
        if w.len() != source.len() {
            return Err(ProcrustesError::WeightsMismatch { got: w.len(), want: source.len() });
        }
        if w.iter().any(|v| !(*v >= T::zero()) || !v.is_finite_val()) {
            return Err(ProcrustesError::Degenerate("weights must be finite and nonnegative".into()));
        }
    }
    let weight = |i: usize| weights.map_or(T::one(), |w| w[i]);
    let active = (0..source.len()).filter(|&i| weight(i) > T::zero()).count();
    let min_pairs = if allow_rank_deficient { 1 } else { 3 };
    if active < min_pairs {
        return Err(ProcrustesError::Degenerate(format!("{active} weighted pairs, need at least {min_pairs}")));
    }

    let mut wsum = T::zero();
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for i in 0..source.len() {
        let w = weight(i);
        wsum += w;
        cs += source[i] * w;
        ct += target[i] * w;
    }
    cs /= wsum;
    ct /= wsum;

    let mut h = Matrix3::zeros();
    for i in 0..source.len() {
        h += ((source[i] - cs) * (target[i] - ct).transpose()) * weight(i);
    }

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(ProcrustesError::Degenerate("SVD did not converge".into())),
    };
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let rank_tol = T::default_epsilon().sqrt() * T::lit(1e-2);
    if !allow_rank_deficient && (sorted[0] <= T::zero() || sorted[1] <= rank_tol * sorted[0]) {
        return Err(ProcrustesError::Degenerate(
            "cross-covariance is rank deficient (points collinear or coincident)".into(),
        ));
    }

    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        let smallest =
            (0..3).min_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(2);
        d[(smallest, smallest)] = -T::one();
    }
    let r = v * d * u.transpose();
    let t = ct - r * cs;

    let mut err = T::zero();
    for i in 0..source.len() {
        err += (r * source[i] + t - target[i]).norm_squared() * weight(i);
    }
    let rms = (err / wsum).sqrt();
    Ok((RigidPose::from_rotation_translation(&r, t), rms))
}

/// Closed-form minimizer of `Σ wᵢ‖R·sᵢ + t − tᵢ‖²`.
pub fn kabsch_solve<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    weights: Option<&[T]>,
) -> Result<AlignmentResult<T>, ProcrustesError> {
    let (pose, rms) = solve_rigid(source, target, weights, false)?;
    Ok(AlignmentResult { pose, rms_residual: rms, inlier_flags: vec![true; source.len()] })
}

/// Iterative Kabsch filtering: solve on the current inliers, then drop every
/// pair whose residual under that solution exceeds the threshold, until the
/// inlier set stops changing or `max_rounds` is reached.
pub fn kabsch_filter<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    cfg: &FilterConfig,
) -> Result<AlignmentResult<T>, ProcrustesError> {
    cfg.validate()?;
    check_lengths(source, target)?;
    let threshold = T::lit(cfg.distance_threshold);
    let mut flags = vec![true; source.len()];
    let mut count = source.len();

    for _ in 0..cfg.max_rounds.max(1) {
        if count < cfg.min_pairs {
            break;
        }
        let (src, tgt) = select(source, target, &flags);
        let (pose, _) = solve_rigid(&src, &tgt, None, false)?;
        let r = pose.rotation();
        let mut changed = false;
        for i in 0..source.len() {
            if flags[i] && (r * source[i] + pose.translation - target[i]).norm() > threshold {
                flags[i] = false;
                count -= 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    if count < cfg.min_pairs {
        return Err(ProcrustesError::Degenerate(format!(
            "{count} pairs survive filtering, need at least {}",
            cfg.min_pairs
        )));
    }
    // Final solve on the surviving set; identical to the last round's pose
    // when that round removed nothing.
    let (src, tgt) = select(source, target, &flags);
    let (pose, rms) = solve_rigid(&src, &tgt, None, false)?;
    Ok(AlignmentResult { pose, rms_residual: rms, inlier_flags: flags })
}

fn select<T: Real>(source: &[Vector3<T>], target: &[Vector3<T>], flags: &[bool]) -> (Vec<Vector3<T>>, Vec<Vector3<T>>) {
    flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| (source[i], target[i])).unzip()
}

/// Outcome of [`icp_refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult<T: Real> {
    pub alignment: AlignmentResult<T>,
    pub iterations: usize,
    /// RMS over associated pairs at the start of each iteration, followed by
    /// the RMS at the returned pose. Non-increasing.
    pub rms_history: Vec<T>,
    pub converged: bool,
    /// Set when no source point had a target neighbor within range; the
    /// returned pose is then the initial pose.
    pub no_op: bool,
}

struct Association<T> {
    src: Vec<Vector3<T>>,
    tgt: Vec<Vector3<T>>,
    flags: Vec<bool>,
    rms: T,
}

fn associate<T: Real>(
    pose: &RigidPose<T>,
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    grid: &VoxelGrid<'_, T>,
    radius: T,
) -> Option<Association<T>> {
    let r = pose.rotation();
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut flags = vec![false; source.len()];
    let mut sq = T::zero();
    for (i, s) in source.iter().enumerate() {
        let moved = r * s + pose.translation;
        if let Some((j, d)) = grid.nearest_within(&moved, radius) {
            src.push(moved);
            tgt.push(target[j]);
            flags[i] = true;
            sq += d * d;
        }
    }
    if src.is_empty() {
        return None;
    }
    let rms = (sq / T::from_count(src.len())).sqrt();
    Some(Association { src, tgt, flags, rms })
}

const ICP_STEP_HALVINGS: usize = 6;

/// Point-to-point ICP aligning `source` onto `target`, starting from `init`.
///
/// Stops when the incremental update moves less than 1e-6 (meters plus
/// radians) or after `max_iters`. Steps that would raise the associated RMS
/// are shortened, and dropped when no fraction helps, so the RMS history is
/// non-increasing.
pub fn icp_refine<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    init: &RigidPose<T>,
    max_corr_dist: T,
    max_iters: usize,
) -> Result<IcpResult<T>, ProcrustesError> {
    if source.is_empty() || target.is_empty() {
        return Err(ProcrustesError::Empty);
    }
    if !(max_corr_dist > T::zero()) {
        return Err(ProcrustesError::InvalidConfig("max_corr_dist must be positive".into()));
    }
    let grid = VoxelGrid::new(target, max_corr_dist);
    let step_tol = T::lit(1e-6);

    let Some(mut current) = associate(init, source, target, &grid, max_corr_dist) else {
        return Ok(IcpResult {
            alignment: AlignmentResult {
                pose: *init,
                rms_residual: T::zero(),
                inlier_flags: vec![false; source.len()],
            },
            iterations: 0,
            rms_history: Vec::new(),
            converged: false,
            no_op: true,
        });
    };

    let mut pose = *init;
    let mut history = vec![current.rms];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let Ok((delta, _)) = solve_rigid(&current.src, &current.tgt, None, false) else {
            break;
        };
        let change = delta.translation.norm() + rotation_angle_between(&Matrix3::identity(), &delta.rotation());
        // Full Kabsch step first, then fractions of it if the RMS would rise.
        let w = crate::geometry::rotation_log(&delta.rotation());
        let mut accepted = None;
        let mut frac = T::one();
        for _ in 0..=ICP_STEP_HALVINGS {
            let step = RigidPose::from_axis_angle(w * frac, delta.translation * frac);
            let candidate = step.compose(&pose);
            if let Some(next) = associate(&candidate, source, target, &grid, max_corr_dist) {
                if next.rms <= current.rms {
                    accepted = Some((candidate, next));
                    break;
                }
            }
            frac *= T::lit(0.5);
        }
        let Some((candidate, next)) = accepted else {
            converged = change < step_tol;
            break;
        };
        pose = candidate;
        history.push(next.rms);
        current = next;
        if change < step_tol {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        alignment: AlignmentResult { pose, rms_residual: current.rms, inlier_flags: current.flags },
        iterations,
        rms_history: history,
        converged,
        no_op: false,
    })
}
