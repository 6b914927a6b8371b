//! Camera registration for RGB-D frames that combines direct keypoint matches
//! with indirect constraints through shared object poses.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the aliases
//! below fix the scalar type.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod eval;
pub mod geometry;
pub mod joint_solver;
pub mod matching;
pub mod observations;
pub mod posegraph;
pub mod procrustes;
pub mod scalar;
pub mod spatial;
pub mod synth;

pub use scalar::Real;

pub type RigidPose64 = geometry::RigidPose<f64>;
pub type RigidPose32 = geometry::RigidPose<f32>;
pub type ObjectPose64 = geometry::ObjectPose<f64>;
pub type ObjectPose32 = geometry::ObjectPose<f32>;
pub type AlignmentResult64 = procrustes::AlignmentResult<f64>;
pub type AlignmentResult32 = procrustes::AlignmentResult<f32>;
pub type RegistrationProblem64 = joint_solver::RegistrationProblem<f64>;
pub type RegistrationProblem32 = joint_solver::RegistrationProblem<f32>;
pub type SolveReport64 = joint_solver::SolveReport<f64>;
pub type SolveReport32 = joint_solver::SolveReport<f32>;
pub type PairReport64 = joint_solver::PairReport<f64>;
pub type PairReport32 = joint_solver::PairReport<f32>;
