//! Robot base placement by grid search over average manipulability.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kinematics::{fk, jacobian, manipulability, JointState, RobotModel};
use crate::markers::DemoTrajectory;
use crate::pmp::{solve_trajectory_at, JointTrajectory, PmpGains, PmpOptions};
use crate::se3::{Pose, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioStatus {
    Ok,
    Diverged,
}

impl ScenarioStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioStatus::Ok => "ok",
            ScenarioStatus::Diverged => "diverged",
        }
    }
}

/// A candidate base pose and its average manipulability.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub base: Pose,
    /// `-inf` when the demonstration could not be tracked.
    pub score: f64,
    pub solved: Option<JointTrajectory>,
    pub status: ScenarioStatus,
}

/// Planar grid of base positions at fixed height and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    pub z: f64,
    pub yaw: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { x_range: (-1.0, 1.0), y_range: (-1.0, 1.0), nx: 10, ny: 10, z: 0.0, yaw: 0.0 }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * step }).collect()
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_range.0 < self.x_range.1) || !(self.y_range.0 < self.y_range.1) {
            return Err(Error::InvalidGrid("ranges must satisfy lower < upper".into()));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidGrid("grid must contain at least one point".into()));
        }
        Ok(())
    }

    /// Base poses ordered by x, then y (the tie-break order).
    pub fn poses(&self) -> Vec<Pose> {
        let rot = Rotation::about_z(self.yaw);
        let ys = linspace(self.y_range.0, self.y_range.1, self.ny);
        linspace(self.x_range.0, self.x_range.1, self.nx)
            .into_iter()
            .flat_map(|x| ys.iter().map(move |&y| Pose::new(rot, Vector3::new(x, y, self.z))))
            .collect()
    }
}

/// End-effector pose in the world with the robot mounted at `base`.
pub fn scenario_fk(base: &Pose, model: &RobotModel, q: &JointState) -> Result<Pose> {
    Ok(base.compose(&fk(model, q)?))
}

/// Trapezoidal mean of `values` over `times`.
pub fn trapezoid_mean(times: &[f64], values: &[f64]) -> Result<f64> {
    assert_eq!(times.len(), values.len());
    let span = times.last().unwrap_or(&0.0) - times.first().unwrap_or(&0.0);
    if !(span > 0.0) {
        return Err(Error::ZeroDuration);
    }
    let integral: f64 = times.windows(2).zip(values.windows(2)).map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) * 0.5).sum();
    Ok(integral / span)
}

/// Average of `det(J J^T)` along a solved joint trajectory.
pub fn trajectory_manipulability(model: &RobotModel, jt: &JointTrajectory) -> Result<f64> {
    let values = jt.states.iter().map(|q| manipulability(&jacobian(model, q)?)).collect::<Result<Vec<_>>>()?;
    trapezoid_mean(&jt.times, &values)
}

/// Solves the demonstration from `base` and scores it. Tracking divergence
/// yields a `Diverged` scenario rather than an error.
pub fn evaluate_scenario(
    model: &RobotModel,
    base: &Pose,
    demo: &DemoTrajectory,
    q0: &JointState,
    gains: &PmpGains,
    opts: &PmpOptions,
) -> Result<Scenario> {
    if !(demo.duration() > 0.0) {
        return Err(Error::ZeroDuration);
    }
    match solve_trajectory_at(model, base, q0, demo, gains, opts) {
        Ok(jt) => {
            let score = trajectory_manipulability(model, &jt)?;
            Ok(Scenario { base: *base, score, solved: Some(jt), status: ScenarioStatus::Ok })
        }
        Err(Error::DivergedTracking { .. }) => {
            Ok(Scenario { base: *base, score: f64::NEG_INFINITY, solved: None, status: ScenarioStatus::Diverged })
        }
        Err(e) => Err(e),
    }
}

/// Average manipulability of the demonstration tracked from `base`
/// (`-inf` if it cannot be tracked).
pub fn average_manipulability(
    model: &RobotModel,
    base: &Pose,
    demo: &DemoTrajectory,
    q0: &JointState,
    gains: &PmpGains,
) -> Result<f64> {
    Ok(evaluate_scenario(model, base, demo, q0, gains, &PmpOptions::default())?.score)
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: Scenario,
    /// Every scenario in evaluation order; only `best` keeps its trajectory.
    pub all: Vec<Scenario>,
}

/// Scores every base pose on `workers` threads.
pub fn evaluate_bases(
    model: &RobotModel,
    demo: &DemoTrajectory,
    bases: &[Pose],
    q0: &JointState,
    gains: &PmpGains,
    opts: &PmpOptions,
    workers: usize,
) -> Result<Vec<Scenario>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| bases.par_iter().map(|b| evaluate_scenario(model, b, demo, q0, gains, opts)).collect())
}

/// Index of the best score; ties go to the earliest index.
pub fn argmax_scenario(all: &[Scenario]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in all.iter().enumerate() {
        if s.status != ScenarioStatus::Ok {
            continue;
        }
        match best {
            Some(b) if !(s.score > all[b].score) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn grid_search(
    model: &RobotModel,
    demo: &DemoTrajectory,
    grid: &GridSpec,
    q0: &JointState,
    gains: &PmpGains,
    opts: &PmpOptions,
    workers: usize,
) -> Result<GridResult> {
    grid.validate()?;
    let mut all = evaluate_bases(model, demo, &grid.poses(), q0, gains, opts, workers)?;
    let b = argmax_scenario(&all).ok_or(Error::AllDiverged)?;
    let best = all[b].clone();
    for s in all.iter_mut() {
        s.solved = None;
    }
    Ok(GridResult { best, all })
}

/// `x,y,score,status`
pub fn score_field_csv(all: &[Scenario]) -> String {
    let mut s = String::from("x,y,score,status\n");
    for sc in all {
        s.push_str(&format!("{},{},{},{}\n", sc.base.pos.x, sc.base.pos.y, sc.score, sc.status.as_str()));
    }
    s
}

/// Heatmap of the score field; diverged cells are grey, the best is outlined.
pub fn score_field_svg(grid: &GridSpec, all: &[Scenario], best: &Scenario) -> String {
    let cell = 40.0;
    let (w, h) = (grid.nx as f64 * cell, grid.ny as f64 * cell);
    let ok: Vec<f64> = all.iter().filter(|s| s.status == ScenarioStatus::Ok).map(|s| s.score).collect();
    let lo = ok.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" viewBox=\"0 0 {w} {}\">\n",
        h + 20.0,
        h + 20.0
    );
    for (i, s) in all.iter().enumerate() {
        let (ix, iy) = (i / grid.ny, i % grid.ny);
        let x = ix as f64 * cell;
        // y grows upwards in the world, downwards in SVG
        let y = (grid.ny - 1 - iy) as f64 * cell;
        let fill = if s.status == ScenarioStatus::Ok {
            let u = if hi > lo { (s.score - lo) / (hi - lo) } else { 1.0 };
            let r = (255.0 * u).round() as u8;
            let b = (255.0 * (1.0 - u)).round() as u8;
            format!("rgb({r},64,{b})")
        } else {
            "rgb(200,200,200)".to_string()
        };
        let stroke = if s.base == best.base { " stroke=\"black\" stroke-width=\"3\"" } else { "" };
        out.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\"{stroke}><title>x={} y={} score={}</title></rect>\n",
            s.base.pos.x, s.base.pos.y, s.score
        ));
    }
    out.push_str(&format!(
        "  <text x=\"2\" y=\"{}\" font-size=\"12\">best x={:.3} y={:.3} score={:.4e}</text>\n</svg>\n",
        h + 15.0,
        best.base.pos.x,
        best.base.pos.y,
        best.score
    ));
    out
}

pub fn save_score_field(dir: &Path, grid: &GridSpec, res: &GridResult) -> Result<()> {
    write_atomic(&dir.join("scores.csv"), score_field_csv(&res.all).as_bytes())?;
    write_atomic(&dir.join("scores.svg"), score_field_svg(grid, &res.all, &res.best).as_bytes())
}
