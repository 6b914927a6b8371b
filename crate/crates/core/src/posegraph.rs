//! Sequence registration: pairwise results become pose-graph edges, loop
//! closures are screened, the graph is restructured and then optimized with a
//! line process that down-weights and prunes inconsistent uncertain edges.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidPose;
use crate::joint_solver::{register_pair, PairOptions, PairReport, PairStatus, SolveReport, SolverConfig, SolverError};
use crate::matching::MatchConfig;
use crate::observations::FrameSet;
use crate::procrustes::FilterConfig;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
    #[error("odometry chain broken between frames {i} and {j}: {reason}")]
    BrokenChain { i: usize, j: usize, reason: String },
    #[error("sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("pose graph is disconnected; unreachable nodes {0:?}")]
    Disconnected(Vec<usize>),
    #[error("pair ({i}, {j}): {source}")]
    Pair { i: usize, j: usize, source: SolverError },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
}

/// Pose-graph edge; `relative_pose` is `T_i⁻¹·T_j` (node j in i's frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub relative_pose: RigidPose<f64>,
    pub information_weight: f64,
    pub uncertain: bool,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub edge_prune_threshold: f64,
    pub loop_preference: f64,
    pub max_corr_dist: f64,
    pub restructure_uncertain_dist: f64,
    pub restructure_certain_dist: f64,
    pub lc_near_window: usize,
    pub lc_near_max_trans: f64,
    pub lc_far_max_trans: f64,
    pub lc_object_max_depth: f64,
    pub lc_min_scale: f64,
    /// Line-process weight μ.
    pub line_process_weight: f64,
    /// Derive μ as `loop_preference · max_corr_dist² · mean information
    /// weight` instead of using `line_process_weight`.
    pub derive_line_process_weight: bool,
    pub max_iterations: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            edge_prune_threshold: 0.45,
            loop_preference: 1.0,
            max_corr_dist: 0.1,
            restructure_uncertain_dist: 0.50,
            restructure_certain_dist: 0.045,
            lc_near_window: 20,
            lc_near_max_trans: 0.60,
            lc_far_max_trans: 1.5,
            lc_object_max_depth: 2.15,
            lc_min_scale: 0.05,
            line_process_weight: 100.0,
            derive_line_process_weight: false,
            max_iterations: 100,
        }
    }
}

impl GraphConfig {
    /// TUM RGB-D settings: 40 cm restructuring distance, 35% loop preference.
    pub fn tum() -> Self {
        Self { restructure_uncertain_dist: 0.40, loop_preference: 0.35, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.edge_prune_threshold) {
            return bad(format!("edge_prune_threshold must be in [0, 1], got {}", self.edge_prune_threshold));
        }
        if !(self.loop_preference > 0.0 && self.loop_preference <= 1.0) {
            return bad(format!("loop_preference must be in (0, 1], got {}", self.loop_preference));
        }
        let positive = [
            ("max_corr_dist", self.max_corr_dist),
            ("restructure_uncertain_dist", self.restructure_uncertain_dist),
            ("restructure_certain_dist", self.restructure_certain_dist),
            ("lc_near_max_trans", self.lc_near_max_trans),
            ("lc_far_max_trans", self.lc_far_max_trans),
            ("lc_object_max_depth", self.lc_object_max_depth),
            ("lc_min_scale", self.lc_min_scale),
            ("line_process_weight", self.line_process_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lc_near_window == 0 {
            return bad("lc_near_window must be positive".into());
        }
        Ok(())
    }

    /// μ used by [`optimize_graph`] for the given edges.
    pub fn effective_line_process_weight(&self, edges: &[GraphEdge]) -> f64 {
        if !self.derive_line_process_weight || edges.is_empty() {
            return self.line_process_weight;
        }
        let mean = edges.iter().map(|e| e.information_weight).sum::<f64>() / edges.len() as f64;
        self.loop_preference * self.max_corr_dist * self.max_corr_dist * mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// An object scale component fell below `lc_min_scale`.
    DegenerateScale,
    /// An object lies behind the camera in both frames.
    ObjectBehindCamera,
    /// An object is at least `lc_object_max_depth` deep in both frames.
    ObjectTooFar,
    /// Keypoint-only closure within the near window moved too far.
    NearTranslation,
    /// Keypoint-only closure beyond the near window moved too far.
    FarTranslation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum LoopDecision {
    Accept,
    Reject(RejectReason),
}

/// Screens a loop-closure candidate from its two-frame solve.
///
/// Object-supported closures check every optimized object: its scale, and its
/// camera-local depth (`z` of `T_c⁻¹·t̄_o`) in the two frames. Keypoint-only
/// closures bound the relative translation by frame distance.
pub fn reject_loop_closure(report: &SolveReport<f64>, pair: (usize, usize), cfg: &GraphConfig) -> LoopDecision {
    if report.object_poses.is_empty() {
        let trans = report.camera_poses[1].translation.norm();
        let gap = pair.0.abs_diff(pair.1);
        return if gap <= cfg.lc_near_window {
            if trans <= cfg.lc_near_max_trans {
                LoopDecision::Accept
            } else {
                LoopDecision::Reject(RejectReason::NearTranslation)
            }
        } else if trans <= cfg.lc_far_max_trans {
            LoopDecision::Accept
        } else {
            LoopDecision::Reject(RejectReason::FarTranslation)
        };
    }
    for obj in &report.object_poses {
        if obj.scale.iter().any(|s| *s < cfg.lc_min_scale) {
            return LoopDecision::Reject(RejectReason::DegenerateScale);
        }
        let depths: Vec<f64> =
            report.camera_poses[..2].iter().map(|c| c.inverse().transform_point(&obj.translation).z).collect();
        if !depths.iter().any(|z| *z > 0.0) {
            return LoopDecision::Reject(RejectReason::ObjectBehindCamera);
        }
        if !depths.iter().any(|z| *z < cfg.lc_object_max_depth) {
            return LoopDecision::Reject(RejectReason::ObjectTooFar);
        }
    }
    LoopDecision::Accept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedClosure {
    pub i: usize,
    pub j: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub num_nodes: usize,
    pub edges: Vec<GraphEdge>,
    pub rejected: Vec<RejectedClosure>,
    /// Chained odometry, the optimizer's starting point.
    pub initial_poses: Vec<RigidPose<f64>>,
}

fn information_weight(report: &SolveReport<f64>) -> f64 {
    report.block_stats.iter().map(|b| b.active).sum::<usize>() as f64
}

/// Turns pairwise results into a restructured pose graph.
///
/// Consecutive pairs become odometry edges, made uncertain when their
/// translation exceeds `restructure_uncertain_dist`. Other successful pairs
/// that pass [`reject_loop_closure`] become loop-closure edges, made certain
/// when their translation is below `restructure_certain_dist`. Edge weights
/// are the surviving correspondence counts.
pub fn build_graph(
    num_frames: usize,
    pairs: &BTreeMap<(usize, usize), PairReport<f64>>,
    cfg: &GraphConfig,
) -> Result<PoseGraph, GraphError> {
    cfg.validate()?;
    if num_frames < 2 {
        return Err(GraphError::TooFewFrames(num_frames));
    }
    let mut edges = Vec::new();
    let mut initial_poses = vec![RigidPose::identity()];
    for i in 0..num_frames - 1 {
        let broken = |reason: String| GraphError::BrokenChain { i, j: i + 1, reason };
        let rep = pairs.get(&(i, i + 1)).ok_or_else(|| broken("pair not attempted".into()))?;
        let (Some(rel), Some(solve)) = (rep.relative_pose, rep.solve.as_ref()) else {
            let reason = match &rep.status {
                PairStatus::Failed(r) => r.clone(),
                PairStatus::Registered => "no pose".into(),
            };
            return Err(broken(reason));
        };
        initial_poses.push(initial_poses[i].compose(&rel));
        edges.push(GraphEdge {
            i,
            j: i + 1,
            relative_pose: rel,
            information_weight: information_weight(solve),
            uncertain: rel.translation.norm() > cfg.restructure_uncertain_dist,
            kind: EdgeKind::Odometry,
        });
    }

    let mut rejected = Vec::new();
    for (&(i, j), rep) in pairs {
        if j <= i + 1 || j >= num_frames {
            continue;
        }
        let (Some(rel), Some(solve)) = (rep.relative_pose, rep.solve.as_ref()) else { continue };
        match reject_loop_closure(solve, (i, j), cfg) {
            LoopDecision::Reject(reason) => rejected.push(RejectedClosure { i, j, reason }),
            LoopDecision::Accept => edges.push(GraphEdge {
                i,
                j,
                relative_pose: rel,
                information_weight: information_weight(solve),
                uncertain: rel.translation.norm() >= cfg.restructure_certain_dist,
                kind: EdgeKind::LoopClosure,
            }),
        }
    }
    Ok(PoseGraph { num_nodes: num_frames, edges, rejected, initial_poses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolution {
    pub poses: Vec<RigidPose<f64>>,
    /// Final line-process value per edge of the input graph (1 for certain
    /// edges, 0 for pruned ones).
    pub switches: Vec<f64>,
    /// Indices of pruned edges, in pruning order.
    pub pruned: Vec<usize>,
    pub iterations: usize,
    pub final_cost: f64,
    /// Set when the cost became non-finite; poses are the best seen.
    pub diverged: bool,
}

fn to_iso(p: &RigidPose<f64>) -> Isometry3<f64> {
    let q = UnitQuaternion::from_matrix(&p.rotation());
    Isometry3::from_parts(Translation3::from(p.translation), q)
}

fn from_iso(p: &Isometry3<f64>) -> RigidPose<f64> {
    RigidPose::from_rotation_translation(&p.rotation.to_rotation_matrix().into_inner(), p.translation.vector)
}

/// `[log R_e; t_e]` of `T_j⁻¹·T_i·Δ_ij`.
fn edge_residual(ti: &Isometry3<f64>, tj: &Isometry3<f64>, delta: &Isometry3<f64>) -> Vector6<f64> {
    let e = tj.inverse() * ti * delta;
    let w = e.rotation.scaled_axis();
    Vector6::new(w.x, w.y, w.z, e.translation.x, e.translation.y, e.translation.z)
}

/// Left perturbation: `R ← Exp(ω)·R`, `t ← t + v`.
fn retract(p: &Isometry3<f64>, d: &Vector6<f64>) -> Isometry3<f64> {
    let w = Vector3::new(d[0], d[1], d[2]);
    let v = Vector3::new(d[3], d[4], d[5]);
    Isometry3::from_parts(
        Translation3::from(p.translation.vector + v),
        UnitQuaternion::from_scaled_axis(w) * p.rotation,
    )
}

#[derive(Clone, Copy)]
struct Edge {
    i: usize,
    j: usize,
    delta: Isometry3<f64>,
    weight: f64,
    uncertain: bool,
}

/// Closed-form line-process minimizer for a weighted squared residual `a`.
fn switch_value(mu: f64, a: f64) -> f64 {
    let r = mu / (mu + a);
    r * r
}

fn total_cost(nodes: &[Isometry3<f64>], edges: &[Edge], s: &[f64], mu: f64) -> f64 {
    edges
        .iter()
        .zip(s)
        .map(|(e, &s)| {
            let a = e.weight * edge_residual(&nodes[e.i], &nodes[e.j], &e.delta).norm_squared();
            if e.uncertain {
                s * a + mu * (s.sqrt() - 1.0).powi(2)
            } else {
                a
            }
        })
        .sum()
}

fn update_switches(nodes: &[Isometry3<f64>], edges: &[Edge], s: &mut [f64], mu: f64) {
    for (e, s) in edges.iter().zip(s.iter_mut()) {
        *s = if e.uncertain {
            let a = e.weight * edge_residual(&nodes[e.i], &nodes[e.j], &e.delta).norm_squared();
            switch_value(mu, a)
        } else {
            1.0
        };
    }
}

const NUMERIC_STEP: f64 = 1e-6;

/// Central-difference Jacobians of an edge residual with respect to left
/// perturbations of its two nodes.
fn edge_jacobians(ti: &Isometry3<f64>, tj: &Isometry3<f64>, delta: &Isometry3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ji = DMatrix::zeros(6, 6);
    let mut jj = DMatrix::zeros(6, 6);
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = NUMERIC_STEP;
        let col = (edge_residual(&retract(ti, &d), tj, delta) - edge_residual(&retract(ti, &-d), tj, delta))
            / (2.0 * NUMERIC_STEP);
        ji.set_column(k, &col);
        let col = (edge_residual(ti, &retract(tj, &d), delta) - edge_residual(ti, &retract(tj, &-d), delta))
            / (2.0 * NUMERIC_STEP);
        jj.set_column(k, &col);
    }
    (ji, jj)
}

struct Solved {
    nodes: Vec<Isometry3<f64>>,
    s: Vec<f64>,
    iterations: usize,
    cost: f64,
    diverged: bool,
}

/// Alternates closed-form switch updates with damped Gauss-Newton steps on
/// the poses; node 0 stays fixed.
fn solve(mut nodes: Vec<Isometry3<f64>>, edges: &[Edge], mu: f64, max_iterations: usize) -> Solved {
    let n = nodes.len();
    let dim = 6 * (n - 1);
    let mut s = vec![1.0; edges.len()];
    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut diverged = false;
    update_switches(&nodes, edges, &mut s, mu);
    let mut cost = total_cost(&nodes, edges, &s, mu);
    if dim == 0 {
        return Solved { nodes, s, iterations, cost, diverged };
    }

    while iterations < max_iterations {
        if cost <= 1e-28 {
            break;
        }
        iterations += 1;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for (e, &se) in edges.iter().zip(&s) {
            let w = e.weight * se;
            if w == 0.0 {
                continue;
            }
            let r = DVector::from_column_slice(edge_residual(&nodes[e.i], &nodes[e.j], &e.delta).as_slice());
            let (ji, jj) = edge_jacobians(&nodes[e.i], &nodes[e.j], &e.delta);
            let blocks = [(e.i, ji), (e.j, jj)];
            for (a, ja) in &blocks {
                if *a == 0 {
                    continue;
                }
                let ra = 6 * (a - 1);
                let mut gv = g.rows_mut(ra, 6);
                gv += ja.transpose() * &r * w;
                for (b, jb) in &blocks {
                    if *b == 0 {
                        continue;
                    }
                    let rb = 6 * (b - 1);
                    let mut hv = h.view_mut((ra, rb), (6, 6));
                    hv += ja.transpose() * jb * w;
                }
            }
        }

        let mut accepted = None;
        while lambda <= 1e10 {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda * (h[(d, d)] + 1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let mut cand = nodes.clone();
            for a in 1..n {
                let d = Vector6::from_column_slice(delta.rows(6 * (a - 1), 6).as_slice());
                cand[a] = retract(&nodes[a], &d);
            }
            let c = total_cost(&cand, edges, &s, mu);
            if !c.is_finite() {
                diverged = true;
            }
            if c < cost {
                accepted = Some((cand, delta.norm()));
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((cand, step)) = accepted else { break };
        nodes = cand;
        let before = cost;
        update_switches(&nodes, edges, &mut s, mu);
        cost = total_cost(&nodes, edges, &s, mu);
        if step < 1e-12 || before - cost <= 1e-12 * before {
            break;
        }
    }
    Solved { nodes, s, iterations, cost, diverged }
}

fn reachable(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen
}

/// Robust pose-graph optimization with node 0 fixed at identity.
///
/// Uncertain edges carry a switch `s ∈ [0, 1]` with penalty `μ(√s − 1)²`.
/// After convergence, uncertain edges with `s < edge_prune_threshold` are
/// pruned (lowest first, never one whose removal would disconnect the graph)
/// and the survivors are solved again.
pub fn optimize_graph(graph: &PoseGraph, cfg: &GraphConfig) -> Result<GraphSolution, GraphError> {
    cfg.validate()?;
    let n = graph.num_nodes;
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.i, e.j)).collect();
    let seen = reachable(n, &pairs);
    let missing: Vec<usize> = (0..n).filter(|&v| !seen[v]).collect();
    if !missing.is_empty() {
        return Err(GraphError::Disconnected(missing));
    }

    let mu = cfg.effective_line_process_weight(&graph.edges);
    let edges: Vec<Edge> = graph
        .edges
        .iter()
        .map(|e| Edge {
            i: e.i,
            j: e.j,
            delta: to_iso(&e.relative_pose),
            weight: e.information_weight,
            uncertain: e.uncertain,
        })
        .collect();
    let start: Vec<Isometry3<f64>> = graph.initial_poses.iter().map(to_iso).collect();
    let first = solve(start, &edges, mu, cfg.max_iterations);

    let mut order: Vec<usize> =
        (0..edges.len()).filter(|&e| edges[e].uncertain && first.s[e] < cfg.edge_prune_threshold).collect();
    order.sort_by(|&a, &b| first.s[a].total_cmp(&first.s[b]).then(a.cmp(&b)));
    let mut keep = vec![true; edges.len()];
    let mut pruned = Vec::new();
    for e in order {
        keep[e] = false;
        let rest: Vec<(usize, usize)> = (0..edges.len()).filter(|&k| keep[k]).map(|k| pairs[k]).collect();
        if reachable(n, &rest).iter().all(|v| *v) {
            pruned.push(e);
        } else {
            keep[e] = true;
        }
    }

    let kept: Vec<usize> = (0..edges.len()).filter(|&k| keep[k]).collect();
    let (result, mut switches) = if pruned.is_empty() {
        let s = first.s.clone();
        (first, s)
    } else {
        let sub: Vec<Edge> = kept.iter().map(|&k| edges[k]).collect();
        let second = solve(first.nodes.clone(), &sub, mu, cfg.max_iterations);
        let mut s = vec![0.0; edges.len()];
        for (slot, &k) in kept.iter().enumerate() {
            s[k] = second.s[slot];
        }
        let merged = Solved {
            iterations: first.iterations + second.iterations,
            diverged: first.diverged || second.diverged,
            ..second
        };
        (merged, s)
    };
    for v in switches.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(GraphSolution {
        poses: result.nodes.iter().map(from_iso).collect(),
        switches,
        pruned,
        iterations: result.iterations,
        final_cost: result.cost,
        diverged: result.diverged,
    })
}

/// Which non-consecutive pairs are registered as loop-closure candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairBudget {
    /// All pairs up to 60 frames, otherwise a stride keeping about 60 nodes.
    Auto,
    All,
    /// Frames whose index is a multiple of the stride.
    Stride(usize),
    /// Odometry only.
    None,
}

/// Largest frame count for which [`PairBudget::Auto`] tries every pair.
pub const AUTO_ALL_PAIRS_MAX: usize = 60;

impl PairBudget {
    /// Every pair to register, consecutive ones first, in ascending order.
    pub fn pairs(&self, k: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = (0..k.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        let stride = match *self {
            PairBudget::None => return out,
            PairBudget::All => 1,
            PairBudget::Stride(s) => s.max(1),
            PairBudget::Auto if k <= AUTO_ALL_PAIRS_MAX => 1,
            PairBudget::Auto => k.div_ceil(AUTO_ALL_PAIRS_MAX),
        };
        for i in (0..k).step_by(stride) {
            for j in ((i + 2)..k).filter(|j| j % stride == 0) {
                out.push((i, j));
            }
        }
        out
    }
}

impl std::str::FromStr for PairBudget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(PairBudget::Auto),
            "all" => Ok(PairBudget::All),
            "none" => Ok(PairBudget::None),
            _ => s
                .strip_prefix("stride:")
                .and_then(|n| n.parse().ok())
                .filter(|n: &usize| *n > 0)
                .map(PairBudget::Stride)
                .ok_or_else(|| format!("unknown pair budget {s:?} (auto, all, none, stride:N)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub trajectory: Vec<RigidPose<f64>>,
    pub graph: PoseGraph,
    pub solution: GraphSolution,
    pub pairs: BTreeMap<(usize, usize), PairReport<f64>>,
}

/// Registers the pairs chosen by `budget` on `jobs` threads, then builds and
/// optimizes the pose graph. Odometry pairs use the 30 cm filter; loop
/// candidates use the 15 cm filter and the sequence matching threshold. ICP
/// associates within `max_corr_dist`. Output does not depend on `jobs`.
pub fn register_sequence(
    fs: &FrameSet,
    budget: PairBudget,
    mcfg: &MatchConfig,
    scfg: &SolverConfig,
    gcfg: &GraphConfig,
    jobs: usize,
) -> Result<SequenceResult, GraphError> {
    use rayon::prelude::*;

    gcfg.validate()?;
    let k = fs.num_frames();
    if k < 2 {
        return Err(GraphError::TooFewFrames(k));
    }
    fs.validate().map_err(|e| GraphError::Pair { i: 0, j: 0, source: e.into() })?;
    let odo_scfg = scfg.with_filter_threshold(FilterConfig::odometry().distance_threshold);
    let loop_scfg = scfg.with_filter_threshold(FilterConfig::loop_closure().distance_threshold);
    let loop_mcfg = mcfg.for_sequence();
    let opts = PairOptions { icp_max_corr_dist: Some(gcfg.max_corr_dist), ..Default::default() };

    let work = budget.pairs(k);
    let run = |&(i, j): &(usize, usize)| {
        let view = fs.pair_view(i, j);
        let (m, s) = if j == i + 1 { (mcfg, &odo_scfg) } else { (&loop_mcfg, &loop_scfg) };
        register_pair::<f64>(&view, m, s, &opts).map(|r| ((i, j), r)).map_err(|source| GraphError::Pair {
            i,
            j,
            source,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| GraphError::ThreadPool(e.to_string()))?;
    let results: Vec<_> = pool.install(|| work.par_iter().map(run).collect());
    let pairs = results.into_iter().collect::<Result<BTreeMap<_, _>, _>>()?;

    let graph = build_graph(k, &pairs, gcfg)?;
    let solution = optimize_graph(&graph, gcfg)?;
    Ok(SequenceResult { trajectory: solution.poses.clone(), graph, solution, pairs })
}
