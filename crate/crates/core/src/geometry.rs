//! Pose parameterizations and point transforms.
//!
//! Rotations use extrinsic X-Y-Z Euler angles, i.e. `R = Rz(γz)·Ry(γy)·Rx(γx)`.
//! A [`RigidPose`] maps camera-local points into the world (reference) frame:
//! `x_world = R·x + t`. An [`ObjectPose`] additionally applies an anisotropic
//! scale in canonical object space before rotating: `R·(p ⊙ s) + t`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// `cos γy` below which the decomposition is treated as gimbal-locked.
pub const GIMBAL_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("object scale must be finite, got {0:?}")]
    NonFiniteScale([f64; 3]),
    #[error("object scale must be positive, got {0:?}")]
    NonPositiveScale([f64; 3]),
    #[error("{what} is {got_rows}x{got_cols}, intrinsics expect {want_rows}x{want_cols}")]
    DimensionMismatch { what: &'static str, got_rows: usize, got_cols: usize, want_rows: usize, want_cols: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rotation matrix for extrinsic X-Y-Z Euler angles.
pub fn rotation_from_euler<T: Real>(angles: &Vector3<T>) -> Matrix3<T> {
    let (sx, cx) = angles.x.sin_cos();
    let (sy, cy) = angles.y.sin_cos();
    let (sz, cz) = angles.z.sin_cos();
    Matrix3::new(
        cz * cy,
        cz * sy * sx - sz * cx,
        cz * sy * cx + sz * sx,
        sz * cy,
        sz * sy * sx + cz * cx,
        sz * sy * cx - cz * sx,
        -sy,
        cy * sx,
        cy * cx,
    )
}

/// Partial derivatives `∂R/∂γx`, `∂R/∂γy`, `∂R/∂γz` of [`rotation_from_euler`].
pub fn rotation_derivatives<T: Real>(angles: &Vector3<T>) -> [Matrix3<T>; 3] {
    let (rx, drx) = axis_rotation(0, angles.x);
    let (ry, dry) = axis_rotation(1, angles.y);
    let (rz, drz) = axis_rotation(2, angles.z);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

pub(crate) fn axis_rotation<T: Real>(axis: usize, angle: T) -> (Matrix3<T>, Matrix3<T>) {
    let (s, c) = angle.sin_cos();
    let z = T::zero();
    let o = T::one();
    match axis {
        0 => (Matrix3::new(o, z, z, z, c, -s, z, s, c), Matrix3::new(z, z, z, z, -s, -c, z, c, -s)),
        1 => (Matrix3::new(c, z, s, z, o, z, -s, z, c), Matrix3::new(-s, z, c, z, z, z, -c, z, -s)),
        _ => (Matrix3::new(c, -s, z, s, c, z, z, z, o), Matrix3::new(-s, -c, z, c, -s, z, z, z, z)),
    }
}

/// Canonical Euler decomposition of a rotation matrix.
///
/// In gimbal lock (`|cos γy| < GIMBAL_EPS`) `γx` is set to zero and the
/// remaining rotation is folded into `γz`.
pub fn euler_from_rotation<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let cy = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    let gy = (-r[(2, 0)]).atan2(cy);
    if cy < T::lit(GIMBAL_EPS) {
        let gz = (-r[(0, 1)]).atan2(r[(1, 1)]);
        Vector3::new(T::zero(), gy, gz)
    } else {
        let gx = r[(2, 1)].atan2(r[(2, 2)]);
        let gz = r[(1, 0)].atan2(r[(0, 0)]);
        Vector3::new(gx, gy, gz)
    }
}

/// Axis-angle vector of a rotation matrix (the SO(3) logarithm).
pub fn rotation_log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Rotation matrix from an axis-angle vector (the SO(3) exponential).
pub fn rotation_exp<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    *Rotation3::new(*w).matrix()
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let m = a.transpose() * b;
    let cos = (m.trace() - T::one()) / T::lit(2.0);
    let sin = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / T::lit(2.0);
    sin.atan2(cos)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff<T: Real, const R: usize, const C: usize>(
    a: &nalgebra::SMatrix<T, R, C>,
    b: &nalgebra::SMatrix<T, R, C>,
) -> T {
    (a - b).iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

/// 6-DoF rigid transform parameterized by Euler angles and a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct RigidPose<T: Real> {
    pub angles: Vector3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidPose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidPose<T> {
    pub fn new(angles: Vector3<T>, translation: Vector3<T>) -> Self {
        Self { angles, translation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(Vector3::zeros(), t)
    }

    pub fn from_rotation_translation(r: &Matrix3<T>, t: Vector3<T>) -> Self {
        Self::new(euler_from_rotation(r), t)
    }

    /// Builds a pose from an axis-angle vector and translation.
    pub fn from_axis_angle(w: Vector3<T>, t: Vector3<T>) -> Self {
        Self::from_rotation_translation(&rotation_exp(&w), t)
    }

    pub fn rotation(&self) -> Matrix3<T> {
        rotation_from_euler(&self.angles)
    }

    /// Homogeneous 4×4 form.
    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse of [`to_matrix`](Self::to_matrix); the bottom row is ignored.
    pub fn from_matrix(m: &Matrix4<T>) -> Self {
        let r: Matrix3<T> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<T> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rotation_translation(&r, t)
    }

    /// `self ∘ other`, i.e. `other` is applied first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = self.rotation();
        Self::from_rotation_translation(&(r * other.rotation()), r * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_rotation_translation(&rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation() * p + self.translation
    }

    pub fn apply(&self, pts: &[Vector3<T>]) -> Vec<Vector3<T>> {
        let r = self.rotation();
        pts.iter().map(|p| r * p + self.translation).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.angles.iter().chain(self.translation.iter()).all(|v| v.is_finite_val())
    }

    pub fn cast<U: Real>(&self) -> RigidPose<U> {
        RigidPose::new(cast_vec(&self.angles), cast_vec(&self.translation))
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &Vector3<T>) -> Vector3<U> {
    v.map(|x| U::lit(x.to_f64_lossy()))
}

/// `a ∘ b` as a free function.
pub fn compose<T: Real>(a: &RigidPose<T>, b: &RigidPose<T>) -> RigidPose<T> {
    a.compose(b)
}

pub fn invert<T: Real>(p: &RigidPose<T>) -> RigidPose<T> {
    p.inverse()
}

pub fn apply_rigid<T: Real>(p: &RigidPose<T>, pts: &[Vector3<T>]) -> Vec<Vector3<T>> {
    p.apply(pts)
}

/// 9-DoF object pose: rotation, translation and per-axis scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct ObjectPose<T: Real> {
    pub angles: Vector3<T>,
    pub translation: Vector3<T>,
    pub scale: Vector3<T>,
}

impl<T: Real> ObjectPose<T> {
    pub fn new(angles: Vector3<T>, translation: Vector3<T>, scale: Vector3<T>) -> Self {
        Self { angles, translation, scale }
    }

    pub fn from_rigid(pose: &RigidPose<T>, scale: Vector3<T>) -> Self {
        Self::new(pose.angles, pose.translation, scale)
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), Vector3::repeat(T::one()))
    }

    pub fn rigid(&self) -> RigidPose<T> {
        RigidPose::new(self.angles, self.translation)
    }

    pub fn rotation(&self) -> Matrix3<T> {
        rotation_from_euler(&self.angles)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let s = [self.scale.x, self.scale.y, self.scale.z].map(|v| v.to_f64_lossy());
        if s.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteScale(s));
        }
        if s.iter().any(|v| *v <= 0.0) {
            return Err(GeometryError::NonPositiveScale(s));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation() * p.component_mul(&self.scale) + self.translation
    }

    /// `R·(p ⊙ s) + t` for every point.
    pub fn apply(&self, noc: &[Vector3<T>]) -> Result<Vec<Vector3<T>>, GeometryError> {
        self.validate()?;
        let r = self.rotation();
        Ok(noc.iter().map(|p| r * p.component_mul(&self.scale) + self.translation).collect())
    }

    pub fn cast<U: Real>(&self) -> ObjectPose<U> {
        ObjectPose::new(cast_vec(&self.angles), cast_vec(&self.translation), cast_vec(&self.scale))
    }
}

pub fn apply_object<T: Real>(p: &ObjectPose<T>, noc: &[Vector3<T>]) -> Result<Vec<Vector3<T>>, GeometryError> {
    p.apply(noc)
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-local point, if it lies in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Back-projects masked pixels of a depth map into camera-local points.
///
/// `depth` and `mask` are indexed `(row, col) = (v, u)`. Pixels with
/// non-positive or non-finite depth are skipped.
pub fn back_project<T: Real>(
    depth: &DMatrix<T>,
    mask: &DMatrix<bool>,
    k: &Intrinsics,
) -> Result<Vec<Vector3<T>>, GeometryError> {
    k.validate()?;
    for (what, (rows, cols)) in [("depth map", depth.shape()), ("mask", mask.shape())] {
        if rows != k.height || cols != k.width {
            return Err(GeometryError::DimensionMismatch {
                what,
                got_rows: rows,
                got_cols: cols,
                want_rows: k.height,
                want_cols: k.width,
            });
        }
    }
    let (fx, fy, cx, cy) = (T::lit(k.fx), T::lit(k.fy), T::lit(k.cx), T::lit(k.cy));
    let mut out = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            let d = depth[(v, u)];
            if !mask[(v, u)] || !(d > T::zero()) || !d.is_finite_val() {
                continue;
            }
            let (uf, vf) = (T::from_count(u), T::from_count(v));
            out.push(Vector3::new((uf - cx) * d / fx, (vf - cy) * d / fy, d));
        }
    }
    Ok(out)
}
