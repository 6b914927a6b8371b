//! JSON reports and stderr tables.

use objreg::eval::pose_error;
use objreg::geometry::RigidPose;
use objreg::joint_solver::{PairOptions, PairStatus, SolveReport};
use objreg::matching::MatchOutcome;
use objreg::posegraph::SequenceResult;
use objreg::PairReport64;
use serde_json::{json, Value};

pub fn pose_json(p: &RigidPose<f64>) -> Value {
    serde_json::to_value(p).expect("pose serializes")
}

pub fn pose_from_json(v: &Value) -> Option<RigidPose<f64>> {
    serde_json::from_value(v.clone()).ok()
}

fn matching_json(m: &MatchOutcome) -> Value {
    let matches: Vec<Value> = m
        .matches
        .iter()
        .map(|o| json!({"a": o.a, "b": o.b, "distance": o.distance, "constraint_count": o.constraint_count}))
        .collect();
    json!({"used_fallback": m.used_fallback, "matches": matches})
}

fn solve_json(s: &SolveReport<f64>) -> Value {
    let blocks: Vec<Value> = s
        .block_stats
        .iter()
        .map(|b| json!({"block": b.block, "correspondences": b.correspondences, "active": b.active, "rms": b.rms}))
        .collect();
    json!({
        "iterations": s.iterations,
        "initial_cost": s.initial_cost,
        "final_cost": s.final_cost,
        "termination": s.termination,
        "pruned_residuals": s.pruned_residuals,
        "blocks": blocks,
        "object_poses": s.object_poses,
    })
}

/// Report of one pair registration. `gt` is the true relative pose, if known.
pub fn pair_json(name: &str, rep: &PairReport64, opts: &PairOptions, gt: Option<&RigidPose<f64>>) -> Value {
    let (status, reason) = match &rep.status {
        PairStatus::Registered => ("registered", Value::Null),
        PairStatus::Failed(r) => ("failed", Value::String(r.clone())),
    };
    let gt_error = match (rep.relative_pose.as_ref(), gt) {
        (Some(est), Some(gt)) => {
            let (rot_deg, trans_m) = pose_error(est, gt);
            json!({"rot_deg": rot_deg, "trans_m": trans_m})
        }
        _ => Value::Null,
    };
    json!({
        "name": name,
        "status": status,
        "reason": reason,
        "relative_pose": rep.relative_pose.as_ref().map(pose_json),
        "keypoints_present": rep.keypoints_present,
        "matching": matching_json(&rep.matching),
        "icp_rms": rep.icp_rms,
        "solve": rep.solve.as_ref().map(solve_json),
        "gt_error": gt_error,
        "options": opts,
    })
}

pub fn pair_table(name: &str, rep: &PairReport64, report: &Value) -> String {
    let mut out = format!("{:<18}{}\n", "pair", name);
    let status = match &rep.status {
        PairStatus::Registered => "registered".to_string(),
        PairStatus::Failed(r) => format!("failed ({r})"),
    };
    out += &format!("{:<18}{}\n", "status", status);
    out += &format!("{:<18}{}\n", "object matches", rep.matching.matches.len());
    out += &format!("{:<18}{}\n", "keypoints", if rep.keypoints_present { "yes" } else { "no" });
    if let Some(p) = &rep.relative_pose {
        let a = p.angles.map(f64::to_degrees);
        out += &format!("{:<18}[{:.3}, {:.3}, {:.3}] deg\n", "rotation", a.x, a.y, a.z);
        let t = p.translation;
        out += &format!("{:<18}[{:.4}, {:.4}, {:.4}] m\n", "translation", t.x, t.y, t.z);
    }
    if let Some(s) = &rep.solve {
        out += &format!("{:<18}{} ({:?})\n", "iterations", s.iterations, s.termination);
        out += &format!("{:<18}{:.3e} -> {:.3e}\n", "cost", s.initial_cost, s.final_cost);
    }
    if let Some(e) = report.get("gt_error").filter(|v| !v.is_null()) {
        out += &format!(
            "{:<18}{:.4} deg, {:.4} m\n",
            "error vs truth",
            e["rot_deg"].as_f64().unwrap_or(f64::NAN),
            e["trans_m"].as_f64().unwrap_or(f64::NAN)
        );
    }
    out
}

pub fn sequence_json(res: &SequenceResult) -> Value {
    let registered = res.pairs.values().filter(|p| p.succeeded()).count();
    let edges: Vec<Value> = res
        .graph
        .edges
        .iter()
        .zip(&res.solution.switches)
        .map(|(e, s)| {
            json!({
                "i": e.i,
                "j": e.j,
                "kind": e.kind,
                "uncertain": e.uncertain,
                "information_weight": e.information_weight,
                "switch": s,
            })
        })
        .collect();
    json!({
        "num_frames": res.trajectory.len(),
        "pairs_attempted": res.pairs.len(),
        "pairs_registered": registered,
        "edges": edges,
        "rejected_closures": res.graph.rejected,
        "pruned_edges": res.solution.pruned,
        "graph_iterations": res.solution.iterations,
        "graph_cost": res.solution.final_cost,
        "diverged": res.solution.diverged,
    })
}

pub fn sequence_table(res: &SequenceResult) -> String {
    let loops = res.graph.edges.iter().filter(|e| e.i + 1 != e.j).count();
    let mut out = format!("{:<18}{}\n", "frames", res.trajectory.len());
    out += &format!(
        "{:<18}{} of {}\n",
        "pairs registered",
        res.pairs.values().filter(|p| p.succeeded()).count(),
        res.pairs.len()
    );
    out += &format!("{:<18}{}\n", "loop closures", loops);
    out += &format!("{:<18}{}\n", "rejected", res.graph.rejected.len());
    out += &format!("{:<18}{}\n", "pruned edges", res.solution.pruned.len());
    out += &format!("{:<18}{:.6e}\n", "graph cost", res.solution.final_cost);
    out
}
