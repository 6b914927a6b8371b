//! `objreg`: synthetic data, pairwise and sequence registration, evaluation.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use objreg::canonical::{to_canonical_string, write_atomic};
use objreg::eval::{self, pose_recall, RecallThreshold, Trajectory};
use objreg::joint_solver::register_pair;
use objreg::observations::{load_problem, save_problem, FrameSet};
use objreg::posegraph::{register_sequence, PairBudget};
use objreg::synth::{self, make_pair_suite, OVERLAP_RADIUS};
use objreg::PairReport64;
use serde_json::{json, Value};

use config::{load_json, PipelineConfig, SynthFile};

#[derive(Parser)]
#[command(name = "objreg", version, about = "Object-grounded RGB-D camera registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic problem, or a pair suite, with ground truth.
    Synth {
        /// Scene or pair-suite settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register the two frames of a problem.
    RegisterPair {
        /// Two-frame problem (JSON).
        #[arg(long)]
        problem: PathBuf,
        /// Pipeline settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the final ICP refinement.
        #[arg(long)]
        no_icp: bool,
        /// Ignore object observations.
        #[arg(long)]
        no_objects: bool,
        /// Ignore keypoint matches.
        #[arg(long)]
        no_keypoints: bool,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Register every frame of a problem and write a TUM trajectory.
    RegisterSequence {
        /// Multi-frame problem (JSON).
        #[arg(long)]
        problem: PathBuf,
        /// Pipeline settings (JSON); defaults when omitted.
        #[arg(long)]
        graph_config: Option<PathBuf>,
        /// Output trajectory (TUM format).
        #[arg(long)]
        out_traj: PathBuf,
        /// Worker threads for pair registration; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
        /// auto, all, none or stride:N.
        #[arg(long, default_value = "auto")]
        pair_budget: PairBudget,
        /// Optional JSON summary file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Metrics: pose recall, trajectory error, overlap.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Pose recall of pair reports against a pair-suite ground truth.
    Recall(RecallArgs),
    /// Absolute trajectory error between two TUM files.
    Ate {
        /// Estimated trajectory (TUM format).
        #[arg(long)]
        est: PathBuf,
        /// Reference trajectory (TUM format).
        #[arg(long)]
        gt: PathBuf,
    },
    /// Geometric overlap between the frames of a problem with ground truth.
    Overlap {
        /// Problem with ground-truth poses (JSON).
        #[arg(long)]
        problem: PathBuf,
    },
}

#[derive(Args)]
struct RecallArgs {
    /// Directory of register-pair reports.
    #[arg(long)]
    reports: PathBuf,
    /// Pair-suite ground truth (gt.json from synth).
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated rot_deg:trans_cm pairs.
    #[arg(long, default_value = "5:10,10:20,15:30")]
    thresholds: String,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::RegisterPair { problem, config, no_icp, no_objects, no_keypoints, out } => {
            cmd_register_pair(&problem, config.as_deref(), no_icp, no_objects, no_keypoints, &out)
        }
        Command::RegisterSequence { problem, graph_config, out_traj, jobs, pair_budget, report } => {
            cmd_register_sequence(&problem, graph_config.as_deref(), &out_traj, jobs, pair_budget, report.as_deref())
        }
        Command::Eval(EvalCommand::Recall(a)) => cmd_recall(&a),
        Command::Eval(EvalCommand::Ate { est, gt }) => cmd_ate(&est, &gt),
        Command::Eval(EvalCommand::Overlap { problem }) => cmd_overlap(&problem),
    }
}

fn emit(v: &Value) {
    println!("{}", to_canonical_string(v));
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = to_canonical_string(v);
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn timestamps(fs: &FrameSet) -> Vec<f64> {
    fs.frames.iter().map(|f| f.timestamp.unwrap_or(f.index as f64)).collect()
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => load_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut file: SynthFile = match config {
        Some(p) => load_json(p)?,
        None => SynthFile::default(),
    };
    if let Some(s) = seed {
        file.scene.rng_seed = s;
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let Some(suite_cfg) = &file.pair_suite else {
        let scene = synth::generate(&file.scene)?;
        let fs = &scene.frame_set;
        let problem = out.join("problem.json");
        save_problem(fs, &problem)?;
        let gt = Trajectory::from_poses(&timestamps(fs), &scene.truth.camera_poses)?;
        let gt_path = out.join("gt.tum");
        eval::write_tum(&gt_path, &gt)?;
        eprintln!(
            "{} frames, {} observations, {} keypoint matches",
            fs.num_frames(),
            fs.observations.len(),
            fs.keypoint_matches.len()
        );
        emit(&json!({
            "problem": problem.display().to_string(),
            "ground_truth": gt_path.display().to_string(),
            "num_frames": fs.num_frames(),
            "observations": fs.observations.len(),
            "keypoint_matches": fs.keypoint_matches.len(),
        }));
        return Ok(());
    };

    let suite = make_pair_suite(&suite_cfg.buckets, suite_cfg.n_per_bucket, &file.scene)?;
    let dir = out.join("pairs");
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::with_capacity(suite.len());
    for (k, pair) in suite.iter().enumerate() {
        let name = format!("pair_{k:04}");
        save_problem(&pair.scene.frame_set, &dir.join(format!("{name}.json")))?;
        let cams = &pair.scene.truth.camera_poses;
        entries.push(json!({
            "name": name,
            "bucket": pair.bucket,
            "overlap": pair.overlap,
            "keypoints_zeroed": pair.keypoints_zeroed,
            "relative_pose": report::pose_json(&cams[0].inverse().compose(&cams[1])),
        }));
    }
    let gt = json!({"buckets": suite_cfg.buckets, "pairs": entries});
    write_json(&out.join("gt.json"), &gt)?;
    for (b, bucket) in suite_cfg.buckets.iter().enumerate() {
        let n = suite.iter().filter(|p| p.bucket == b).count();
        let z = suite.iter().filter(|p| p.bucket == b && p.keypoints_zeroed).count();
        eprintln!("bucket {b} {bucket:?}: {n} pairs, {z} without keypoints");
    }
    emit(
        &json!({"pairs": suite.len(), "dir": dir.display().to_string(), "ground_truth": out.join("gt.json").display().to_string()}),
    );
    Ok(())
}

fn cmd_register_pair(
    problem: &Path,
    config: Option<&Path>,
    no_icp: bool,
    no_objects: bool,
    no_keypoints: bool,
    out: &Path,
) -> Result<()> {
    let cfg = pipeline_config(config)?;
    let fs = load_problem(problem)?;
    ensure!(fs.num_frames() == 2, "{} has {} frames, register-pair needs 2", problem.display(), fs.num_frames());
    let mut opts = cfg.pair;
    opts.icp &= !no_icp;
    opts.use_objects &= !no_objects;
    opts.use_keypoints &= !no_keypoints;
    let rep: PairReport64 = register_pair(&fs, &cfg.matching, &cfg.solver, &opts)?;
    let gt = fs.ground_truth.as_ref().map(|g| g[0].inverse().compose(&g[1]));
    let name = problem.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let v = report::pair_json(&name, &rep, &opts, gt.as_ref());
    write_json(out, &v)?;
    eprint!("{}", report::pair_table(&name, &rep, &v));
    emit(&v);
    Ok(())
}

fn cmd_register_sequence(
    problem: &Path,
    config: Option<&Path>,
    out_traj: &Path,
    jobs: Option<usize>,
    budget: PairBudget,
    report_path: Option<&Path>,
) -> Result<()> {
    let cfg = pipeline_config(config)?;
    let fs = load_problem(problem)?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    ensure!(jobs > 0, "--jobs must be positive");
    let res = register_sequence(&fs, budget, &cfg.matching, &cfg.solver, &cfg.graph, jobs)?;
    let traj = Trajectory::from_poses(&timestamps(&fs), &res.trajectory)?;
    eval::write_tum(out_traj, &traj)?;
    let mut v = report::sequence_json(&res);
    if let Some(gt) = &fs.ground_truth {
        let gt = Trajectory::from_poses(&timestamps(&fs), gt)?;
        v["ate_rmse_vs_problem_gt"] = json!(eval::ate_rmse(&traj, &gt)?);
    }
    v["trajectory"] = json!(out_traj.display().to_string());
    if let Some(p) = report_path {
        write_json(p, &v)?;
    }
    eprint!("{}", report::sequence_table(&res));
    emit(&v);
    Ok(())
}

fn cmd_recall(a: &RecallArgs) -> Result<()> {
    let thresholds = RecallThreshold::parse_list(&a.thresholds)?;
    ensure!(!thresholds.is_empty(), "no thresholds given");
    let gt: Value = load_json(&a.gt)?;
    let gt_pairs = gt["pairs"].as_array().context("ground truth has no \"pairs\" array")?;

    let mut reports: BTreeMap<String, Value> = BTreeMap::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.reports)
        .with_context(|| format!("reading {}", a.reports.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let v: Value = load_json(&p)?;
        let name = v["name"].as_str().with_context(|| format!("{} has no name", p.display()))?.to_string();
        if reports.insert(name.clone(), v).is_some() {
            bail!("duplicate report for {name}");
        }
    }

    // Missing or failed registrations count as misses.
    let mut errors = Vec::new();
    let mut missing = 0;
    for g in gt_pairs {
        let name = g["name"].as_str().context("ground-truth pair without name")?;
        let truth = report::pose_from_json(&g["relative_pose"]).with_context(|| format!("bad pose for {name}"))?;
        let est = reports.get(name).and_then(|r| report::pose_from_json(&r["relative_pose"]));
        if !reports.contains_key(name) {
            missing += 1;
        }
        let err = est.map_or((f64::INFINITY, f64::INFINITY), |e| eval::pose_error(&e, &truth));
        errors.push((g, err));
    }
    ensure!(!errors.is_empty(), "ground truth lists no pairs");
    for name in reports.keys() {
        ensure!(gt_pairs.iter().any(|g| g["name"] == name.as_str()), "report {name} has no ground truth");
    }

    let recall_of = |subset: &[(f64, f64)]| -> Result<Vec<Value>> {
        thresholds
            .iter()
            .map(|th| Ok(json!({"rot_deg": th.rot_deg, "trans_cm": th.trans_cm, "recall": pose_recall(subset, th)?})))
            .collect()
    };
    let all: Vec<(f64, f64)> = errors.iter().map(|(_, e)| *e).collect();
    let mut groups = Vec::new();
    let mut buckets: Vec<u64> = errors.iter().filter_map(|(g, _)| g["bucket"].as_u64()).collect();
    buckets.sort_unstable();
    buckets.dedup();
    for b in buckets {
        for zeroed in [None, Some(true), Some(false)] {
            let subset: Vec<(f64, f64)> = errors
                .iter()
                .filter(|(g, _)| g["bucket"].as_u64() == Some(b))
                .filter(|(g, _)| zeroed.is_none_or(|z| g["keypoints_zeroed"].as_bool() == Some(z)))
                .map(|(_, e)| *e)
                .collect();
            if subset.is_empty() {
                continue;
            }
            groups.push(json!({
                "bucket": b,
                "keypoints": match zeroed { None => "any", Some(true) => "none", Some(false) => "present" },
                "pairs": subset.len(),
                "recall": recall_of(&subset)?,
            }));
        }
    }
    let v = json!({"pairs": all.len(), "missing_reports": missing, "recall": recall_of(&all)?, "groups": groups});
    eprintln!("{:<24}{:>8}{:>10}", "group", "pairs", "recall");
    let row = |label: String, n: usize, r: &Value| {
        for t in r.as_array().into_iter().flatten() {
            eprintln!(
                "{:<24}{:>8}{:>9.2}%  @ {}deg/{}cm",
                label,
                n,
                t["recall"].as_f64().unwrap_or(f64::NAN),
                t["rot_deg"],
                t["trans_cm"]
            );
        }
    };
    row("all".into(), all.len(), &v["recall"]);
    for g in &groups {
        let label = format!("bucket {} kp={}", g["bucket"], g["keypoints"].as_str().unwrap_or(""));
        row(label, g["pairs"].as_u64().unwrap_or(0) as usize, &g["recall"]);
    }
    emit(&v);
    Ok(())
}

fn cmd_ate(est: &Path, gt: &Path) -> Result<()> {
    let est = eval::read_tum(est)?;
    let gt = eval::read_tum(gt)?;
    let pairs = eval::associate(&est, &gt, eval::ASSOCIATION_TOLERANCE).len();
    let rmse = eval::ate_rmse(&est, &gt)?;
    eprintln!("ATE RMSE {rmse:.6} m over {pairs} associated poses");
    emit(&json!({"ate_rmse_m": rmse, "associations": pairs}));
    Ok(())
}

fn cmd_overlap(problem: &Path) -> Result<()> {
    let fs = load_problem(problem)?;
    let gt = fs.ground_truth.as_ref().context("overlap needs ground-truth poses in the problem")?;
    let world: Vec<Vec<_>> = (0..fs.num_frames()).map(|f| gt[f].apply(&fs.frame_cloud(f))).collect();
    let mut pairs = Vec::new();
    for i in 0..world.len() {
        for j in i + 1..world.len() {
            let ov =
                synth::overlap(&world[i], &world[j], OVERLAP_RADIUS).with_context(|| format!("frames {i} and {j}"))?;
            eprintln!("{i:>5} {j:>5} {ov:>8.2}%");
            pairs.push(json!({"i": i, "j": j, "overlap": ov}));
        }
    }
    emit(&json!({"radius_m": OVERLAP_RADIUS, "pairs": pairs}));
    Ok(())
}
