//! File-based pipeline driver: `gen → filter → gmr → base → solve → replay →
//! report`. Each stage reads the previous stage's files under `--out-dir`
//! (or explicitly given paths) and writes its own, atomically.

// validation is written as `!(x > 0.0)` on purpose: NaN must fail it
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sengrip_core::base::{grid_search, save_score_field, GridSpec};
use sengrip_core::gmm::{build_dataset, em_fit, envelope_fraction, overlay_csv, regress_trajectory, EmConfig};
use sengrip_core::io::{csv_line, write_atomic, Table};
use sengrip_core::kinematics::example_7dof;
use sengrip_core::markers::{filter_trajectory, load_marker_csv, marker_csv, FilterConfig, RigidTemplate};
use sengrip_core::pmp::{solve_trajectory_at, JointTrajectory, PmpGains, PmpOptions};
use sengrip_core::replay::{
    classify_success, haptic_mismatch, simulate_replay_from, ReplayConfig, ReplayResult, TauPolicy, WrenchSeries,
};
use sengrip_core::se3::{Pose, Rotation};
use sengrip_core::synth::{
    default_template, finger_labels, gen_marker_frames, gen_paced_trials, gen_replay_wrenches, gen_wrench_series,
    paced_spec, perturbed_states, ready_posture, sample_times, MarkerSynth, WrenchSynth,
};
use sengrip_core::{DemoTrajectory, Error, RobotModel};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_SAFETY: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "sengrip", version, about = "Demonstration-to-replay pipeline for a sensorized gripper")]
pub struct Cli {
    /// TOML file with parameter defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Robot model TOML; the bundled 7-DoF arm by default.
    #[arg(long, global = true, value_name = "FILE")]
    pub robot: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic fixtures: paced marker trials, template, wrenches, offsets.
    Gen(GenArgs),
    /// Register and smooth marker trials into demonstration trajectories.
    Filter(FilterArgs),
    /// Fit a mixture to the trials and regress the average demonstration.
    Gmr(GmrArgs),
    /// Grid-search the robot base placement.
    Base(BaseArgs),
    /// Solve the joint trajectory at the chosen base.
    Solve(SolveArgs),
    /// Simulate impedance replays of the joint trajectory.
    Replay(ReplayArgs),
    /// Score replay wrenches against the demonstration.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of paced demonstration trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Number of replay wrench fixtures.
    #[arg(long)]
    pub replays: Option<usize>,
    /// Marker noise std, m.
    #[arg(long)]
    pub marker_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Template CSV `label,x,y,z` [default: <out>/gen/template.csv]
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Smoothing fraction in (0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Marker CSVs `t,label,x,y,z` [default: <out>/gen/markers/*.csv]
    pub markers: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GmrArgs {
    /// Number of mixture components.
    #[arg(short = 'K', long = "components")]
    pub k: Option<usize>,
    /// Regression grid rate, Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Demonstration CSVs [default: <out>/filter/demos/*.csv]
    pub demos: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaseArgs {
    /// Demonstration to track [default: <out>/gmr/mean.csv]
    #[arg(long)]
    pub demo: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub grid_x: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub grid_y: Option<Vec<f64>>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// [default: <out>/gmr/mean.csv]
    #[arg(long)]
    pub demo: Option<PathBuf>,
    /// Base choice JSON [default: <out>/base/best.json]
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// [default: <out>/solve/joints.csv]
    #[arg(long)]
    pub joints: Option<PathBuf>,
    /// Gripper command CSV `t,d` [default: <out>/solve/gripper.csv]
    #[arg(long)]
    pub gripper: Option<PathBuf>,
    /// Joint stiffness, one value or one per joint (comma separated), N m/rad.
    #[arg(long, value_delimiter = ',')]
    pub stiffness: Option<Vec<f64>>,
    #[arg(long)]
    pub damping_ratio: Option<f64>,
    /// Recalibration offsets CSV `joint,delta_q` (1-based joints, rad).
    #[arg(long, value_name = "FILE")]
    pub delta_q: Option<PathBuf>,
    /// `clamp` saturates torques, `fault` aborts on the first violation.
    #[arg(long)]
    pub tau_policy: Option<TauPolicy>,
    /// Number of replay runs.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Std of the per-run start perturbation, rad.
    #[arg(long)]
    pub init_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// |tau_z| that counts as a successful twist, N m.
    #[arg(long)]
    pub tz_threshold: f64,
    /// Success window, s [default: the demonstration span].
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub window: Option<Vec<f64>>,
    /// [default: <out>/gen/wrench/demo.csv]
    #[arg(long)]
    pub demo_wrench: Option<PathBuf>,
    /// Replay summary to fold into the report [default: <out>/replay/summary.csv if present]
    #[arg(long)]
    pub replay_summary: Option<PathBuf>,
    /// Replay wrench CSVs [default: <out>/gen/wrench/replay_*.csv]
    pub replay_wrenches: Vec<PathBuf>,
}

/// Parameter defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub robot: Option<PathBuf>,
    /// Start posture for the solver and fixtures.
    pub q0: Option<Vec<f64>>,
    pub gen: GenSection,
    pub filter: FilterSection,
    pub gmr: GmrSection,
    pub pmp: PmpSection,
    pub base: BaseSection,
    pub replay: ReplaySection,
    pub report: ReportSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub trials: Option<usize>,
    pub replays: Option<usize>,
    pub marker_sigma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub template: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub fingers: Option<(String, String)>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmrSection {
    pub k: Option<usize>,
    pub rate: Option<f64>,
    pub reg: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmpSection {
    pub k_l: Option<f64>,
    pub k_r: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub grid_x: Option<(f64, f64)>,
    pub grid_y: Option<(f64, f64)>,
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub z: Option<f64>,
    pub yaw: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub stiffness: Option<Vec<f64>>,
    pub damping_ratio: Option<f64>,
    pub delta_q: Option<PathBuf>,
    pub tau_policy: Option<String>,
    pub trials: Option<usize>,
    pub init_sigma: Option<f64>,
    pub dt: Option<f64>,
    /// Joint log rate, Hz.
    pub log_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub window: Option<(f64, f64)>,
}

/// A failed stage: the module error plus an optional hint.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub error: Error,
    pub hint: Option<String>,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        exit_code(&self.error)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)?;
        if let Some(h) = &self.hint {
            write!(f, "\nhint: {h}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

/// 2 for bad input, 3 for numerical failure, 4 for a torque-limit fault.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TorqueLimitExceeded { .. } => EXIT_SAFETY,
        Error::AngleNearPi(_)
        | Error::NonFinite(_)
        | Error::DivergedTracking { .. }
        | Error::AllDiverged
        | Error::DegenerateGeometry
        | Error::NoRegistrableFrames
        | Error::DegenerateComponent { .. } => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

type StageResult<T> = std::result::Result<T, Error>;

/// Resolved global settings shared by all stages.
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub model: RobotModel,
    pub cfg: PipelineConfig,
}

impl Context {
    fn pool(&self) -> StageResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new().num_threads(self.workers).build().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    fn q0(&self) -> StageResult<DVector<f64>> {
        let q = match &self.cfg.q0 {
            Some(v) => DVector::from_vec(v.clone()),
            None if self.model.dof() == 7 => ready_posture(),
            None => DVector::zeros(self.model.dof()),
        };
        if q.len() != self.model.dof() {
            return Err(Error::DimensionMismatch { expected: self.model.dof(), got: q.len() });
        }
        Ok(q)
    }

    fn gains(&self) -> PmpGains {
        let p = &self.cfg.pmp;
        let d = PmpGains::default();
        PmpGains {
            k_l: p.k_l.unwrap_or(d.k_l),
            k_r: p.k_r.unwrap_or(d.k_r),
            gamma: p.gamma.unwrap_or(d.gamma),
            lambda: p.lambda.unwrap_or(d.lambda),
            dt: p.dt.unwrap_or(d.dt),
        }
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }
}

/// Independent seed for a named sub-stream of the global seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn read_config(path: &Path) -> StageResult<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })?;
    toml::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
}

/// Sorted `*.csv` files in `dir` whose name starts with `prefix`.
fn list_csv(dir: &Path, prefix: &str) -> StageResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.display().to_string(), msg: e.to_string() })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with(prefix) && name.ends_with(".csv")
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("no {prefix}*.csv files in {}", dir.display())));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn write_text(path: &Path, s: &str) -> StageResult<()> {
    write_atomic(path, s.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> StageResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> StageResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
}

/// Parses argv and runs the selected stage.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let stage = match &cli.command {
        Command::Gen(_) => "gen",
        Command::Filter(_) => "filter",
        Command::Gmr(_) => "gmr",
        Command::Base(_) => "base",
        Command::Solve(_) => "solve",
        Command::Replay(_) => "replay",
        Command::Report(_) => "report",
    };
    let tag = |error: Error| CliError { stage, error, hint: None };
    let cfg = match &cli.config {
        Some(p) => read_config(p).map_err(tag)?,
        None => PipelineConfig::default(),
    };
    let model = match cli.robot.as_ref().or(cfg.robot.as_ref()) {
        Some(p) => RobotModel::load(p).map_err(tag)?,
        None => example_7dof(),
    };
    let workers = cli.workers.or(cfg.workers).unwrap_or(1);
    if workers == 0 {
        return Err(tag(Error::InvalidConfig("--workers must be at least 1".into())));
    }
    let ctx = Context {
        out: cli.out_dir.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out")),
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        workers,
        model,
        cfg,
    };
    let res = match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Filter(a) => cmd_filter(&ctx, a),
        Command::Gmr(a) => cmd_gmr(&ctx, a),
        Command::Base(a) => cmd_base(&ctx, a),
        Command::Solve(a) => cmd_solve(&ctx, a),
        Command::Replay(a) => cmd_replay(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    };
    res.map_err(|error| {
        let hint = match &error {
            Error::AllDiverged => Some(
                "no base position tracked the demonstration; move --grid-x/--grid-y so the robot can reach it".into(),
            ),
            Error::TorqueLimitExceeded { .. } => Some("lower --stiffness or use --tau-policy clamp".into()),
            _ => None,
        };
        CliError { stage, error, hint }
    })
}

pub fn cmd_gen(ctx: &Context, args: &GenArgs) -> StageResult<()> {
    let g = &ctx.cfg.gen;
    let n = args.trials.or(g.trials).unwrap_or(4);
    let replays = args.replays.or(g.replays).unwrap_or(30);
    let sigma = args.marker_sigma.or(g.marker_sigma).unwrap_or(5e-4);
    let dir = ctx.stage_dir("gen");

    let mut spec = paced_spec(&ctx.model, &ctx.q0()?, ctx.seed)?;
    spec.n_trials = n;
    spec.noise_sigma_marker = sigma;
    let template = default_template();
    ctx.pool()?.install(|| -> StageResult<()> {
        let trials = gen_paced_trials(&spec)?;
        write_text(&dir.join("template.csv"), &template.to_csv())?;
        for (i, tr) in trials.iter().enumerate() {
            let name = format!("trial_{}.csv", i + 1);
            tr.save(&dir.join("truth").join(&name))?;
            let synth = MarkerSynth { sigma, seed: sub_seed(ctx.seed, 100 + i as u64), ..Default::default() };
            let frames = gen_marker_frames(tr, &template, &synth)?;
            write_text(&dir.join("markers").join(&name), &marker_csv(&frames))?;
        }

        let demo = WrenchSynth { noise_sigma: 0.05, seed: sub_seed(ctx.seed, 1), ..Default::default() };
        gen_wrench_series(&demo)?.save(&dir.join("wrench/demo.csv"))?;
        for (i, w) in gen_replay_wrenches(&demo, replays, sub_seed(ctx.seed, 2))?.iter().enumerate() {
            w.save(&dir.join(format!("wrench/replay_{:02}.csv", i + 1)))?;
        }

        let dq = &perturbed_states(&DVector::zeros(ctx.model.dof()), 1, 0.01, sub_seed(ctx.seed, 3))?[0];
        let mut s = String::from("joint,delta_q\n");
        for (i, v) in dq.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, v));
        }
        write_text(&dir.join("delta_q.csv"), &s)
    })?;
    println!("gen: {n} trials, {replays} replay wrench fixtures -> {}", dir.display());
    Ok(())
}

#[derive(Debug)]
struct FilterSummaryRow {
    file: String,
    frames: usize,
    held: usize,
    aperture_filled: usize,
    rms_mean: f64,
    rms_max: f64,
}

pub fn cmd_filter(ctx: &Context, args: &FilterArgs) -> StageResult<()> {
    let f = &ctx.cfg.filter;
    let template_path = args.template.clone().or(f.template.clone()).unwrap_or_else(|| ctx.out.join("gen/template.csv"));
    let template = RigidTemplate::load(&template_path)?;
    let markers = if args.markers.is_empty() { list_csv(&ctx.out.join("gen/markers"), "")? } else { args.markers.clone() };
    let cfg = FilterConfig { alpha: args.alpha.or(f.alpha).unwrap_or(0.3), fingers: Some(f.fingers.clone().unwrap_or_else(finger_labels)) };
    let dir = ctx.stage_dir("filter");

    let rows = ctx.pool()?.install(|| {
        markers
            .par_iter()
            .map(|path| -> StageResult<FilterSummaryRow> {
                let frames = load_marker_csv(path)?;
                let out = filter_trajectory(&frames, &template, &cfg)?;
                out.trajectory.save(&dir.join("demos").join(format!("{}.csv", stem(path))))?;
                let rms: Vec<f64> = out.raw.iter().flatten().map(|r| r.rms).collect();
                Ok(FilterSummaryRow {
                    file: path.display().to_string(),
                    frames: frames.len(),
                    held: out.held.iter().filter(|h| **h).count(),
                    aperture_filled: out.aperture_filled.iter().filter(|h| **h).count(),
                    rms_mean: rms.iter().sum::<f64>() / rms.len() as f64,
                    rms_max: rms.iter().copied().fold(0.0, f64::max),
                })
            })
            .collect::<Vec<_>>()
    });
    let rows = rows.into_iter().collect::<StageResult<Vec<_>>>()?;
    let mut s = String::from("file,frames,held,aperture_filled,rms_mean,rms_max\n");
    for r in &rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.file, r.frames, r.held, r.aperture_filled, r.rms_mean, r.rms_max));
    }
    write_text(&dir.join("summary.csv"), &s)?;
    println!("filter: {} trials -> {}", rows.len(), dir.join("demos").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GmrSummary {
    k: usize,
    samples: usize,
    iterations: usize,
    converged: bool,
    log_likelihood: f64,
    envelope_fraction: f64,
    t0: f64,
    t1: f64,
}

pub fn cmd_gmr(ctx: &Context, args: &GmrArgs) -> StageResult<()> {
    let g = &ctx.cfg.gmr;
    let files = if args.demos.is_empty() { list_csv(&ctx.out.join("filter/demos"), "")? } else { args.demos.clone() };
    let trials = files.iter().map(|p| DemoTrajectory::load(p)).collect::<StageResult<Vec<_>>>()?;
    let data = build_dataset(&trials)?;
    let d = EmConfig::default();
    let em = EmConfig { k: args.k.or(g.k).unwrap_or(d.k), seed: ctx.seed, reg: g.reg.unwrap_or(d.reg), ..d };
    let rate = args.rate.or(g.rate).unwrap_or(20.0);
    if !(rate > 0.0) {
        return Err(Error::InvalidConfig(format!("rate must be positive, got {rate}")));
    }
    let (fit, reg) = ctx.pool()?.install(|| -> StageResult<_> {
        let fit = em_fit(&data, &em)?;
        // the span every trial covers
        let t0 = trials.iter().map(|t| t.times[0]).fold(f64::NEG_INFINITY, f64::max);
        let t1 = trials.iter().map(|t| *t.times.last().unwrap()).fold(f64::INFINITY, f64::min);
        if !(t1 > t0) {
            return Err(Error::InvalidDataset("trials share no common time span".into()));
        }
        let reg = regress_trajectory(&fit.mixture, &sample_times(t0, t1, rate));
        Ok((fit, reg))
    })?;

    let dir = ctx.stage_dir("gmr");
    fit.mixture.save(&dir.join("mixture.json"))?;
    reg.to_demo()?.save(&dir.join("mean.csv"))?;
    write_text(&dir.join("overlay.csv"), &overlay_csv(&data, &reg))?;
    let mut ll = String::from("iteration,log_likelihood\n");
    for (i, v) in fit.log_likelihood.iter().enumerate() {
        ll.push_str(&format!("{i},{v}\n"));
    }
    write_text(&dir.join("loglik.csv"), &ll)?;
    let summary = GmrSummary {
        k: em.k,
        samples: data.len(),
        iterations: fit.log_likelihood.len().saturating_sub(1),
        converged: fit.converged,
        log_likelihood: *fit.log_likelihood.last().unwrap_or(&f64::NAN),
        envelope_fraction: envelope_fraction(&data, &reg, 1e-3),
        t0: reg.times[0],
        t1: *reg.times.last().unwrap(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "gmr: K={} on {} samples, {} iterations, envelope {:.3} -> {}",
        summary.k,
        summary.samples,
        summary.iterations,
        summary.envelope_fraction,
        dir.display()
    );
    Ok(())
}

/// Chosen base pose: position, yaw about world z and its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseChoice {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub score: f64,
}

impl BaseChoice {
    pub fn pose(&self) -> Pose {
        Pose::new(Rotation::about_z(self.yaw), nalgebra::Vector3::new(self.x, self.y, self.z))
    }
}

fn range(flag: &Option<Vec<f64>>, cfg: Option<(f64, f64)>, default: (f64, f64)) -> (f64, f64) {
    match flag {
        Some(v) => (v[0], v[1]),
        None => cfg.unwrap_or(default),
    }
}

pub fn cmd_base(ctx: &Context, args: &BaseArgs) -> StageResult<()> {
    let b = &ctx.cfg.base;
    let demo = DemoTrajectory::load(&args.demo.clone().unwrap_or_else(|| ctx.out.join("gmr/mean.csv")))?;
    let d = GridSpec::default();
    let grid = GridSpec {
        x_range: range(&args.grid_x, b.grid_x, d.x_range),
        y_range: range(&args.grid_y, b.grid_y, d.y_range),
        nx: args.nx.or(b.nx).unwrap_or(d.nx),
        ny: args.ny.or(b.ny).unwrap_or(d.ny),
        z: b.z.unwrap_or(d.z),
        yaw: b.yaw.unwrap_or(d.yaw),
    };
    let res = grid_search(&ctx.model, &demo, &grid, &ctx.q0()?, &ctx.gains(), &PmpOptions::default(), ctx.workers)?;
    let dir = ctx.stage_dir("base");
    save_score_field(&dir, &grid, &res)?;
    let p = res.best.base.pos;
    let choice = BaseChoice { x: p.x, y: p.y, z: p.z, yaw: grid.yaw, score: res.best.score };
    write_json(&dir.join("best.json"), &choice)?;
    let ok = res.all.iter().filter(|s| s.score.is_finite()).count();
    println!(
        "base: best ({:.4}, {:.4}) score {:.6e}, {ok}/{} scenarios tracked -> {}",
        choice.x,
        choice.y,
        choice.score,
        res.all.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    samples: usize,
    final_err_lin: f64,
    final_err_ang: f64,
    max_err_lin: f64,
    max_err_ang: f64,
}

pub fn cmd_solve(ctx: &Context, args: &SolveArgs) -> StageResult<()> {
    let demo = DemoTrajectory::load(&args.demo.clone().unwrap_or_else(|| ctx.out.join("gmr/mean.csv")))?;
    let choice: BaseChoice = read_json(&args.base.clone().unwrap_or_else(|| ctx.out.join("base/best.json")))?;
    let jt = solve_trajectory_at(&ctx.model, &choice.pose(), &ctx.q0()?, &demo, &ctx.gains(), &PmpOptions::default())?;
    let dir = ctx.stage_dir("solve");
    jt.save(&dir.join("joints.csv"))?;
    let mut g = String::from("t,d\n");
    for (t, d) in demo.times.iter().zip(&demo.aperture) {
        g.push_str(&csv_line([*t, *d]));
        g.push('\n');
    }
    write_text(&dir.join("gripper.csv"), &g)?;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let summary = SolveSummary {
        samples: jt.len(),
        final_err_lin: *jt.err_lin.last().unwrap(),
        final_err_ang: *jt.err_ang.last().unwrap(),
        max_err_lin: max(&jt.err_lin),
        max_err_ang: max(&jt.err_ang),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "solve: {} samples, final error {:.3e} m / {:.3e} rad -> {}",
        summary.samples,
        summary.final_err_lin,
        summary.final_err_ang,
        dir.display()
    );
    Ok(())
}

/// Reads `t,d` gripper commands.
pub fn load_gripper(path: &Path) -> StageResult<(Vec<f64>, Vec<f64>)> {
    let t = Table::read(path)?;
    t.expect_header(&["t", "d"])?;
    let mut times = Vec::with_capacity(t.rows.len());
    let mut d = Vec::with_capacity(t.rows.len());
    for row in 0..t.rows.len() {
        times.push(t.f64_at(row, 0)?);
        d.push(t.f64_at(row, 1)?);
    }
    Ok((times, d))
}

/// Reads `joint,delta_q` offsets for a `dof`-joint robot; unlisted joints are 0.
pub fn load_delta_q(path: &Path, dof: usize) -> StageResult<DVector<f64>> {
    let t = Table::read(path)?;
    t.expect_header(&["joint", "delta_q"])?;
    let mut dq = DVector::zeros(dof);
    for row in 0..t.rows.len() {
        let j: usize = t.str_at(row, 0)?.parse().map_err(|_| t.error(format!("row {}: bad joint index", row + 2)))?;
        if j == 0 || j > dof {
            return Err(t.error(format!("row {}: joint {j} outside 1..={dof}", row + 2)));
        }
        dq[j - 1] = t.f64_at(row, 1)?;
    }
    Ok(dq)
}

/// Keeps every `stride`-th sample and the last one.
fn decimate(r: &ReplayResult, stride: usize) -> ReplayResult {
    let n = r.times.len();
    let keep: Vec<usize> = (0..n).filter(|i| i % stride == 0 || *i == n - 1).collect();
    ReplayResult {
        times: keep.iter().map(|&i| r.times[i]).collect(),
        q_cmd: keep.iter().map(|&i| r.q_cmd[i].clone()).collect(),
        q: keep.iter().map(|&i| r.q[i].clone()).collect(),
        torque: keep.iter().map(|&i| r.torque[i].clone()).collect(),
        gripper: keep.iter().map(|&i| r.gripper[i]).collect(),
        clamp_events: r.clamp_events.clone(),
    }
}

pub fn cmd_replay(ctx: &Context, args: &ReplayArgs) -> StageResult<()> {
    let rs = &ctx.cfg.replay;
    let dof = ctx.model.dof();
    let jt = JointTrajectory::load(&args.joints.clone().unwrap_or_else(|| ctx.out.join("solve/joints.csv")))?;
    let (gt, grip) = load_gripper(&args.gripper.clone().unwrap_or_else(|| ctx.out.join("solve/gripper.csv")))?;
    if gt != jt.times {
        return Err(Error::InvalidDataset("gripper command times differ from the joint trajectory".into()));
    }
    let stiffness = args.stiffness.clone().or(rs.stiffness.clone()).unwrap_or_else(|| vec![200.0]);
    let stiffness = match stiffness.len() {
        1 => DVector::from_element(dof, stiffness[0]),
        n if n == dof => DVector::from_vec(stiffness),
        n => return Err(Error::DimensionMismatch { expected: dof, got: n }),
    };
    let tau_policy = match (args.tau_policy, &rs.tau_policy) {
        (Some(p), _) => p,
        (None, Some(s)) => s.parse()?,
        (None, None) => TauPolicy::Clamp,
    };
    let delta_q = match args.delta_q.as_ref().or(rs.delta_q.as_ref()) {
        Some(p) => load_delta_q(p, dof)?,
        None => DVector::zeros(dof),
    };
    let cfg = ReplayConfig {
        stiffness,
        damping_ratio: args.damping_ratio.or(rs.damping_ratio).unwrap_or(1.0),
        delta_q,
        tau_policy,
        dt: rs.dt.unwrap_or(1e-3),
    };
    cfg.validate(dof)?;
    let trials = args.trials.or(rs.trials).unwrap_or(30);
    let sigma = args.init_sigma.or(rs.init_sigma).unwrap_or(0.005);
    let log_rate = rs.log_rate.unwrap_or(50.0);
    if trials == 0 || !(log_rate > 0.0) {
        return Err(Error::InvalidConfig("need at least one trial and a positive log rate".into()));
    }
    let stride = ((1.0 / (cfg.dt * log_rate)).round() as usize).max(1);
    let start = &jt.states[0] + &cfg.delta_q;
    let starts = perturbed_states(&start, trials, sigma, sub_seed(ctx.seed, 4))?;

    let results: Vec<StageResult<ReplayResult>> = ctx.pool()?.install(|| {
        starts.par_iter().map(|q| simulate_replay_from(&ctx.model, &cfg, &jt, &grip, Some(q))).collect()
    });
    // report the lowest-numbered failing trial, whatever the thread timing
    let results = results.into_iter().collect::<StageResult<Vec<_>>>()?;

    let dir = ctx.stage_dir("replay");
    let mut s = String::from("trial,max_tracking_error,final_tracking_error,clamp_events\n");
    for (i, r) in results.iter().enumerate() {
        let sub = dir.join(format!("trial_{:02}", i + 1));
        write_text(&sub.join("joints.csv"), &decimate(r, stride).joint_log_csv())?;
        write_text(&sub.join("events.json"), &(r.events_json() + "\n"))?;
        let last = r.q.len() - 1;
        let final_err = (&r.q_cmd[last] + &cfg.delta_q - &r.q[last]).amax();
        s.push_str(&format!("{},{},{},{}\n", i + 1, r.max_tracking_error(&cfg.delta_q), final_err, r.clamp_events.len()));
    }
    write_text(&dir.join("summary.csv"), &s)?;
    let clamps: usize = results.iter().map(|r| r.clamp_events.len()).sum();
    println!("replay: {trials} runs, {clamps} clamp events -> {}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrialReport {
    pub file: String,
    pub success: bool,
    pub peak_tz: f64,
    pub rms: [f64; 6],
    pub peak: [f64; 6],
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tz_threshold: f64,
    pub window: (f64, f64),
    pub trials: usize,
    pub successes: usize,
    /// Per axis `[fx, fy, fz, tx, ty, tz]`, averaged over trials.
    pub mean_rms: [f64; 6],
    /// Per axis, largest over trials.
    pub max_peak: [f64; 6],
    pub replay_clamp_events: Option<usize>,
    pub replay_max_tracking_error: Option<f64>,
    pub per_trial: Vec<TrialReport>,
}

const AXES: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "success: {}/{} replays reached |tau_z| >= {} N m in [{}, {}] s\n",
            self.successes, self.trials, self.tz_threshold, self.window.0, self.window.1
        );
        s.push_str("haptic mismatch (demonstration - replay), frame R:\n  axis  mean_rms  max_peak\n");
        for (i, a) in AXES.iter().enumerate() {
            s.push_str(&format!("  {a:<4}  {:>8.4}  {:>8.4}\n", self.mean_rms[i], self.max_peak[i]));
        }
        if let (Some(c), Some(e)) = (self.replay_clamp_events, self.replay_max_tracking_error) {
            s.push_str(&format!("replay: {c} torque clamp events, max joint tracking error {e:.4e} rad\n"));
        }
        s
    }
}

fn read_replay_summary(path: &Path) -> StageResult<(usize, f64)> {
    let t = Table::read(path)?;
    t.expect_header(&["trial", "max_tracking_error", "final_tracking_error", "clamp_events"])?;
    let mut clamps = 0usize;
    let mut err = 0.0f64;
    for row in 0..t.rows.len() {
        err = err.max(t.f64_at(row, 1)?);
        clamps += t.str_at(row, 3)?.parse::<usize>().map_err(|_| t.error(format!("row {}: bad count", row + 2)))?;
    }
    Ok((clamps, err))
}

pub fn cmd_report(ctx: &Context, args: &ReportArgs) -> StageResult<()> {
    let demo = WrenchSeries::load(&args.demo_wrench.clone().unwrap_or_else(|| ctx.out.join("gen/wrench/demo.csv")))?;
    let files = if args.replay_wrenches.is_empty() {
        list_csv(&ctx.out.join("gen/wrench"), "replay_")?
    } else {
        args.replay_wrenches.clone()
    };
    let window = match &args.window {
        Some(v) => (v[0], v[1]),
        None => ctx.cfg.report.window.unwrap_or((demo.times[0], *demo.times.last().unwrap())),
    };
    if !(args.tz_threshold >= 0.0) {
        return Err(Error::InvalidConfig("--tz-threshold must be non-negative".into()));
    }
    let dir = ctx.stage_dir("report");
    let mut per_trial = Vec::with_capacity(files.len());
    let mut rows = String::from("file,success,peak_tz");
    for p in ["rms", "peak"] {
        for a in AXES {
            rows.push_str(&format!(",{p}_{a}"));
        }
    }
    rows.push('\n');
    for path in &files {
        let replay = WrenchSeries::load(path)?;
        let m = haptic_mismatch(&demo, &replay)?;
        let s = classify_success(&replay, args.tz_threshold, window)?;
        write_text(&dir.join(format!("mismatch_{}.csv", stem(path))), &m.to_csv())?;
        rows.push_str(&format!(
            "{},{},{},{}\n",
            path.display(),
            s.success,
            s.peak_tz,
            csv_line(m.rms.iter().chain(m.peak.iter()).copied())
        ));
        per_trial.push(TrialReport {
            file: path.display().to_string(),
            success: s.success,
            peak_tz: s.peak_tz,
            rms: m.rms.into(),
            peak: m.peak.into(),
        });
    }
    let n = per_trial.len();
    let mut mean_rms = [0.0; 6];
    let mut max_peak = [0.0f64; 6];
    for t in &per_trial {
        for i in 0..6 {
            mean_rms[i] += t.rms[i] / n as f64;
            max_peak[i] = max_peak[i].max(t.peak[i]);
        }
    }
    let summary_path = args.replay_summary.clone().or_else(|| {
        let p = ctx.out.join("replay/summary.csv");
        p.exists().then_some(p)
    });
    let replay = summary_path.map(|p| read_replay_summary(&p)).transpose()?;
    let report = Report {
        tz_threshold: args.tz_threshold,
        window,
        trials: n,
        successes: per_trial.iter().filter(|t| t.success).count(),
        mean_rms,
        max_peak,
        replay_clamp_events: replay.map(|r| r.0),
        replay_max_tracking_error: replay.map(|r| r.1),
        per_trial,
    };
    write_text(&dir.join("trials.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &report)?;
    let text = report.to_text();
    write_text(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}
