//! Pose errors, pose recall, absolute trajectory error and TUM trajectory files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{format_sig9, write_atomic};
use crate::geometry::{rotation_angle_between, RigidPose};
use crate::procrustes::solve_rigid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no errors to evaluate")]
    Empty,
    #[error("invalid threshold {0:?}: expected ROT_DEG:TRANS_CM with both positive")]
    Threshold(String),
    #[error("only {found} timestamp associations within {tolerance} s, need at least 2")]
    TooFewAssociations { found: usize, tolerance: f64 },
    #[error("line {line}: {message}: {content:?}")]
    Malformed { line: usize, message: String, content: String },
    #[error("trajectory is invalid: {0}")]
    Invalid(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Rotation error in degrees and translation error in meters.
pub fn pose_error(est: &RigidPose<f64>, gt: &RigidPose<f64>) -> (f64, f64) {
    let rot = rotation_angle_between(&est.rotation(), &gt.rotation()).to_degrees();
    (rot, (est.translation - gt.translation).norm())
}

/// Joint rotation/translation threshold for pose recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallThreshold {
    pub rot_deg: f64,
    pub trans_cm: f64,
}

impl RecallThreshold {
    pub fn new(rot_deg: f64, trans_cm: f64) -> Result<Self, EvalError> {
        if !(rot_deg > 0.0 && trans_cm > 0.0 && rot_deg.is_finite() && trans_cm.is_finite()) {
            return Err(EvalError::Threshold(format!("{rot_deg}:{trans_cm}")));
        }
        Ok(Self { rot_deg, trans_cm })
    }

    /// `(5°, 10 cm)`, `(10°, 20 cm)` and `(15°, 30 cm)`.
    pub fn standard() -> Vec<RecallThreshold> {
        vec![
            Self { rot_deg: 5.0, trans_cm: 10.0 },
            Self { rot_deg: 10.0, trans_cm: 20.0 },
            Self { rot_deg: 15.0, trans_cm: 30.0 },
        ]
    }

    /// Inclusive on both components.
    pub fn passes(&self, rot_deg: f64, trans_m: f64) -> bool {
        rot_deg <= self.rot_deg && trans_m <= self.trans_cm / 100.0
    }

    /// Parses a comma-separated list such as `5:10,10:20,15:30`.
    pub fn parse_list(s: &str) -> Result<Vec<RecallThreshold>, EvalError> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl FromStr for RecallThreshold {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::Threshold(s.to_string());
        let (r, t) = s.split_once(':').ok_or_else(bad)?;
        let r: f64 = r.trim().parse().map_err(|_| bad())?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        Self::new(r, t).map_err(|_| bad())
    }
}

/// Percentage of `(rot_deg, trans_m)` errors within the threshold.
pub fn pose_recall(errors: &[(f64, f64)], th: &RecallThreshold) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let pass = errors.iter().filter(|(r, t)| th.passes(*r, *t)).count();
    Ok(100.0 * pass as f64 / errors.len() as f64)
}

/// Timestamp association tolerance, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Allowed deviation of a TUM quaternion norm from one.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// One TUM trajectory line. The quaternion is `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub quaternion: [f64; 4],
}

impl TrajectoryEntry {
    /// Quaternion taken with non-negative `w`.
    pub fn from_pose(timestamp: f64, pose: &RigidPose<f64>) -> Self {
        let q = UnitQuaternion::from_matrix(&pose.rotation());
        let c = q.coords;
        let s = if c.w < 0.0 { -1.0 } else { 1.0 };
        Self { timestamp, translation: pose.translation, quaternion: [s * c.x, s * c.y, s * c.z, s * c.w] }
    }

    pub fn pose(&self) -> RigidPose<f64> {
        let [x, y, z, w] = self.quaternion;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        RigidPose::from_rotation_translation(&q.to_rotation_matrix().into_inner(), self.translation)
    }
}

/// Timestamped camera-to-world poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn from_poses(timestamps: &[f64], poses: &[RigidPose<f64>]) -> Result<Self, EvalError> {
        if timestamps.len() != poses.len() {
            return Err(EvalError::Invalid(format!("{} timestamps for {} poses", timestamps.len(), poses.len())));
        }
        let t =
            Self { entries: timestamps.iter().zip(poses).map(|(t, p)| TrajectoryEntry::from_pose(*t, p)).collect() };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> Vec<RigidPose<f64>> {
        self.entries.iter().map(TrajectoryEntry::pose).collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (k, e) in self.entries.iter().enumerate() {
            if !e.timestamp.is_finite() || !e.translation.iter().all(|v| v.is_finite()) {
                return Err(EvalError::Invalid(format!("entry {k} is not finite")));
            }
            let n = e.quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(EvalError::Invalid(format!("entry {k} quaternion norm {n}")));
            }
            if k > 0 && e.timestamp <= self.entries[k - 1].timestamp {
                return Err(EvalError::Invalid(format!("timestamps not increasing at entry {k}")));
            }
        }
        Ok(())
    }

    /// Applies `g` on the left of every pose.
    pub fn transformed(&self, g: &RigidPose<f64>) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|e| TrajectoryEntry::from_pose(e.timestamp, &g.compose(&e.pose())))
                .collect(),
        }
    }
}

/// Parses TUM text: `timestamp tx ty tz qx qy qz qw` per line, `#` comments.
///
/// Quaternions within 1e-6 of unit norm are kept as written; others within
/// 1e-3 are normalized; the rest are rejected.
pub fn parse_tum(text: &str) -> Result<Trajectory, EvalError> {
    let mut entries: Vec<TrajectoryEntry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: &str| EvalError::Malformed { line: n + 1, message: message.into(), content: raw.into() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| bad(&format!("not a number: {f}")))?;
            if !slot.is_finite() {
                return Err(bad("non-finite value"));
            }
        }
        let mut q = [v[4], v[5], v[6], v[7]];
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(bad(&format!("quaternion norm {norm} is not unit")));
        }
        if (norm - 1.0).abs() > 1e-6 {
            q.iter_mut().for_each(|c| *c /= norm);
        }
        if let Some(prev) = entries.last() {
            if v[0] <= prev.timestamp {
                return Err(bad("timestamps must increase strictly"));
            }
        }
        entries.push(TrajectoryEntry { timestamp: v[0], translation: Vector3::new(v[1], v[2], v[3]), quaternion: q });
    }
    Ok(Trajectory { entries })
}

/// TUM text. Timestamps use six decimals, other values nine significant digits.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in &traj.entries {
        let _ = write!(out, "{:.6}", e.timestamp);
        for v in e.translation.iter().chain(e.quaternion.iter()) {
            let _ = write!(out, " {}", format_sig9(*v));
        }
        out.push('\n');
    }
    out
}

pub fn read_tum(path: &Path) -> Result<Trajectory, EvalError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    parse_tum(&text)
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<(), EvalError> {
    write_atomic(path, format_tum(traj).as_bytes())
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Index pairs `(est, gt)` with timestamps within `tolerance`, matched
/// greedily by smallest difference, each index used once, sorted by `est`.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, a) in est.entries.iter().enumerate() {
        let t = a.timestamp;
        let start = gt.entries.partition_point(|b| b.timestamp < t - tolerance);
        for (j, b) in gt.entries.iter().enumerate().skip(start) {
            if b.timestamp > t + tolerance {
                break;
            }
            cand.push(((b.timestamp - t).abs(), i, j));
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Absolute trajectory error after rigid alignment of `est` onto `gt`, meters.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewAssociations { found: pairs.len(), tolerance: ASSOCIATION_TOLERANCE });
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.entries[i].translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt.entries[j].translation).collect();
    let (_, rms) = solve_rigid(&src, &dst, None, true).map_err(|e| EvalError::Alignment(e.to_string()))?;
    Ok(rms)
}
