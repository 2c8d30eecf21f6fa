//! Joint impedance replay on a simulated viscous plant, torque-limit
//! filtering and haptic-mismatch scoring.
//!
//! Each joint is a first-order plant `b q' = tau` driven by
//! `tau = K ((q_cmd + dq) - q) - c q'`. Both viscous coefficients follow
//! from the damping ratio, `b = c = 2 zeta sqrt(K * 1 kg m^2)`, so an
//! unsaturated joint relaxes with time constant `(b + c) / K`.

use std::path::Path;

use nalgebra::{DVector, Vector3, Vector6};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{csv_line, write_atomic, Table};
use crate::kinematics::RobotModel;
use crate::pmp::JointTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TauPolicy {
    Clamp,
    Fault,
}

impl std::str::FromStr for TauPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(TauPolicy::Clamp),
            "fault" => Ok(TauPolicy::Fault),
            _ => Err(Error::InvalidConfig(format!("unknown torque policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    /// Joint stiffness, N m / rad.
    pub stiffness: DVector<f64>,
    pub damping_ratio: f64,
    /// Recalibration offsets added to the commanded joints, rad.
    pub delta_q: DVector<f64>,
    pub tau_policy: TauPolicy,
    pub dt: f64,
}

/// Sanity bound on recalibration offsets.
pub const MAX_DELTA_Q: f64 = 0.2;

impl ReplayConfig {
    /// Uniform stiffness, no offsets, clamp policy, 1 ms step.
    pub fn uniform(dof: usize, stiffness: f64, damping_ratio: f64) -> Self {
        ReplayConfig {
            stiffness: DVector::from_element(dof, stiffness),
            damping_ratio,
            delta_q: DVector::zeros(dof),
            tau_policy: TauPolicy::Clamp,
            dt: 1e-3,
        }
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.stiffness.len() != dof || self.delta_q.len() != dof {
            return Err(Error::DimensionMismatch { expected: dof, got: self.stiffness.len().min(self.delta_q.len()) });
        }
        if self.stiffness.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::InvalidConfig("stiffness must be positive".into()));
        }
        if !(self.damping_ratio > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("damping ratio and dt must be positive".into()));
        }
        if self.delta_q.iter().any(|d| !(d.abs() < MAX_DELTA_Q)) {
            return Err(Error::InvalidConfig(format!("|delta_q| must stay below {MAX_DELTA_Q} rad")));
        }
        Ok(())
    }

    /// Impedance damping `c_i`, also used as the plant viscosity `b_i`.
    pub fn damping(&self) -> DVector<f64> {
        self.stiffness.map(|k| 2.0 * self.damping_ratio * k.sqrt())
    }

    /// Closed-loop time constant `(b_i + c_i) / K_i` of an unsaturated joint.
    pub fn time_constant(&self) -> DVector<f64> {
        let c = self.damping();
        DVector::from_iterator(self.stiffness.len(), c.iter().zip(self.stiffness.iter()).map(|(c, k)| 2.0 * c / k))
    }
}

/// `K o ((q_cmd + dq) - q) - c o q'`
pub fn impedance_torque(cfg: &ReplayConfig, q_cmd: &DVector<f64>, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
    let err = (q_cmd + &cfg.delta_q) - q;
    err.component_mul(&cfg.stiffness) - cfg.damping().component_mul(qdot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClampEvent {
    pub t: f64,
    pub joint: usize,
    pub requested: f64,
}

/// Saturates to `+-tau_lim` (clamp) or fails on the first violation (fault).
pub fn torque_limit_filter(
    tau: &DVector<f64>,
    tau_lim: &[f64],
    policy: TauPolicy,
    t: f64,
) -> Result<(DVector<f64>, Vec<ClampEvent>)> {
    let mut out = tau.clone();
    let mut events = Vec::new();
    for (i, v) in out.iter_mut().enumerate() {
        let lim = tau_lim[i];
        if v.abs() > lim {
            if policy == TauPolicy::Fault {
                return Err(Error::TorqueLimitExceeded { joint: i, t, tau: *v, limit: lim });
            }
            events.push(ClampEvent { t, joint: i, requested: *v });
            *v = v.clamp(-lim, lim);
        }
    }
    Ok((out, events))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub times: Vec<f64>,
    /// Commanded joints before offsets.
    pub q_cmd: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    /// Filtered torques actually applied.
    pub torque: Vec<DVector<f64>>,
    pub gripper: Vec<f64>,
    pub clamp_events: Vec<ClampEvent>,
}

impl ReplayResult {
    /// `t,qc1..qcD,q1..qD,tau1..tauD,grip`
    pub fn joint_log_csv(&self) -> String {
        let d = self.q.first().map_or(0, |q| q.len());
        let mut s = String::from("t");
        for p in ["qc", "q", "tau"] {
            for i in 1..=d {
                s.push_str(&format!(",{p}{i}"));
            }
        }
        s.push_str(",grip\n");
        for k in 0..self.times.len() {
            let row = std::iter::once(self.times[k])
                .chain(self.q_cmd[k].iter().copied())
                .chain(self.q[k].iter().copied())
                .chain(self.torque[k].iter().copied())
                .chain([self.gripper[k]]);
            s.push_str(&csv_line(row));
            s.push('\n');
        }
        s
    }

    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.clamp_events).expect("events serialize")
    }

    /// Largest `|q - (q_cmd + dq)|` over the log.
    pub fn max_tracking_error(&self, delta_q: &DVector<f64>) -> f64 {
        self.q.iter().zip(&self.q_cmd).map(|(q, c)| (c + delta_q - q).amax()).fold(0.0, f64::max)
    }
}

fn sample_series(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if n == 0 {
        return 0.0;
    }
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let k = times.partition_point(|&x| x <= t) - 1;
    let s = (t - times[k]) / (times[k + 1] - times[k]);
    values[k] + (values[k + 1] - values[k]) * s
}

/// Simulates the impedance replay of `commanded`, starting at rest on the
/// offset-corrected first command. `gripper_cmd` holds one aperture per
/// commanded sample and is relayed alongside (linearly interpolated).
pub fn simulate_replay(
    model: &RobotModel,
    cfg: &ReplayConfig,
    commanded: &JointTrajectory,
    gripper_cmd: &[f64],
) -> Result<ReplayResult> {
    simulate_replay_from(model, cfg, commanded, gripper_cmd, None)
}

pub fn simulate_replay_from(
    model: &RobotModel,
    cfg: &ReplayConfig,
    commanded: &JointTrajectory,
    gripper_cmd: &[f64],
    q_init: Option<&DVector<f64>>,
) -> Result<ReplayResult> {
    let dof = model.dof();
    cfg.validate(dof)?;
    if commanded.is_empty() {
        return Err(Error::InvalidDataset("empty commanded trajectory".into()));
    }
    if commanded.dof() != dof {
        return Err(Error::DimensionMismatch { expected: dof, got: commanded.dof() });
    }
    if gripper_cmd.len() != commanded.len() {
        return Err(Error::DimensionMismatch { expected: commanded.len(), got: gripper_cmd.len() });
    }
    let t0 = commanded.times[0];
    let t1 = *commanded.times.last().unwrap();
    let steps = ((t1 - t0) / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let c = cfg.damping();
    let b = c.clone();
    let k = &cfg.stiffness;

    let mut q = match q_init {
        Some(q) => q.clone(),
        None => &commanded.states[0] + &cfg.delta_q,
    };
    let mut res = ReplayResult {
        times: Vec::with_capacity(steps + 1),
        q_cmd: Vec::with_capacity(steps + 1),
        q: Vec::with_capacity(steps + 1),
        torque: Vec::with_capacity(steps + 1),
        gripper: Vec::with_capacity(steps + 1),
        clamp_events: Vec::new(),
    };
    for step in 0..=steps {
        let t = if step == steps { t1 } else { t0 + step as f64 * cfg.dt };
        let q_cmd = commanded.sample(t);
        // the damper and the plant share q', so solve the loop for it first
        let err = (&q_cmd + &cfg.delta_q) - &q;
        let qdot_free = DVector::from_iterator(dof, (0..dof).map(|i| k[i] * err[i] / (b[i] + c[i])));
        let tau = impedance_torque(cfg, &q_cmd, &q, &qdot_free);
        let (tau_f, events) = torque_limit_filter(&tau, &model.tau_lim, cfg.tau_policy, t)?;
        res.clamp_events.extend(events);
        let qdot = DVector::from_iterator(
            dof,
            (0..dof).map(|i| if tau_f[i] == tau[i] { qdot_free[i] } else { tau_f[i] / b[i] }),
        );
        res.times.push(t);
        res.q_cmd.push(q_cmd);
        res.q.push(q.clone());
        res.torque.push(tau_f);
        res.gripper.push(sample_series(&commanded.times, gripper_cmd, t));
        if step < steps {
            let h = if step + 1 == steps { t1 - t } else { cfg.dt };
            q += qdot * h;
        }
    }
    Ok(res)
}

/// Force/torque samples in a named frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WrenchSeries {
    pub times: Vec<f64>,
    pub force: Vec<Vector3<f64>>,
    pub torque: Vec<Vector3<f64>>,
    pub frame: String,
}

impl WrenchSeries {
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 || self.force.len() != n || self.torque.len() != n {
            return Err(Error::InvalidDataset("wrench series lengths differ or are empty".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidDataset("wrench times must be strictly increasing".into()));
        }
        if self.frame.is_empty() {
            return Err(Error::InvalidDataset("wrench frame label required".into()));
        }
        Ok(())
    }

    pub fn wrench(&self, i: usize) -> Vector6<f64> {
        let (f, t) = (self.force[i], self.torque[i]);
        Vector6::new(f.x, f.y, f.z, t.x, t.y, t.z)
    }

    /// Piecewise-linear wrench at `t`, clamped at the ends.
    pub fn sample(&self, t: f64) -> Vector6<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.wrench(0);
        }
        if t >= self.times[n - 1] {
            return self.wrench(n - 1);
        }
        let k = self.times.partition_point(|&x| x <= t) - 1;
        let s = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.wrench(k) * (1.0 - s) + self.wrench(k + 1) * s
    }

    /// `t,fx,fy,fz,tx,ty,tz,frame`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,fx,fy,fz,tx,ty,tz,frame\n");
        for i in 0..self.times.len() {
            let w = self.wrench(i);
            s.push_str(&format!("{},{}\n", csv_line(std::iter::once(self.times[i]).chain(w.iter().copied())), self.frame));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        t.expect_header(&["t", "fx", "fy", "fz", "tx", "ty", "tz", "frame"])?;
        let mut w = WrenchSeries { times: vec![], force: vec![], torque: vec![], frame: String::new() };
        for row in 0..t.rows.len() {
            let v: Vec<f64> = (0..7).map(|c| t.f64_at(row, c)).collect::<Result<_>>()?;
            let frame = t.str_at(row, 7)?;
            if row == 0 {
                w.frame = frame.to_string();
            } else if frame != w.frame {
                return Err(t.error(format!("row {}: frame {frame:?} differs from {:?}", row + 2, w.frame)));
            }
            w.times.push(v[0]);
            w.force.push(Vector3::new(v[1], v[2], v[3]));
            w.torque.push(Vector3::new(v[4], v[5], v[6]));
        }
        w.validate().map_err(|e| Error::parse(path, e))?;
        Ok(w)
    }
}

/// Demonstration minus replay wrench at the demonstration timestamps that
/// fall inside the replay's time span.
#[derive(Debug, Clone, PartialEq)]
pub struct HapticMismatch {
    pub times: Vec<f64>,
    pub diff: Vec<Vector6<f64>>,
    /// Per axis `[fx, fy, fz, tx, ty, tz]`.
    pub rms: Vector6<f64>,
    pub peak: Vector6<f64>,
}

pub fn haptic_mismatch(demo: &WrenchSeries, replay: &WrenchSeries) -> Result<HapticMismatch> {
    demo.validate()?;
    replay.validate()?;
    if demo.frame != replay.frame {
        return Err(Error::FrameMismatch(demo.frame.clone(), replay.frame.clone()));
    }
    let (r0, r1) = (replay.times[0], *replay.times.last().unwrap());
    let mut out = HapticMismatch { times: vec![], diff: vec![], rms: Vector6::zeros(), peak: Vector6::zeros() };
    for (i, &t) in demo.times.iter().enumerate() {
        if t < r0 || t > r1 {
            continue;
        }
        let d = demo.wrench(i) - replay.sample(t);
        out.rms += d.component_mul(&d);
        out.peak = out.peak.zip_map(&d, |p, v| p.max(v.abs()));
        out.times.push(t);
        out.diff.push(d);
    }
    if out.times.is_empty() {
        return Err(Error::NoOverlap);
    }
    out.rms = (out.rms / out.times.len() as f64).map(f64::sqrt);
    Ok(out)
}

impl HapticMismatch {
    /// `t,dfx,dfy,dfz,dtx,dty,dtz`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,dfx,dfy,dfz,dtx,dty,dtz\n");
        for (t, d) in self.times.iter().zip(&self.diff) {
            s.push_str(&csv_line(std::iter::once(*t).chain(d.iter().copied())));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Success {
    pub success: bool,
    /// Largest `|tau_z|` inside the window.
    pub peak_tz: f64,
}

/// Assembly counts as successful when `|tau_z|` reaches `tz_threshold`
/// inside `window`.
pub fn classify_success(replay: &WrenchSeries, tz_threshold: f64, window: (f64, f64)) -> Result<Success> {
    replay.validate()?;
    let (a, b) = window;
    if !(a <= b) || a < replay.times[0] || b > *replay.times.last().unwrap() {
        return Err(Error::WindowOutOfRange(a, b));
    }
    let peak_tz = replay
        .times
        .iter()
        .zip(&replay.torque)
        .filter(|(t, _)| **t >= a && **t <= b)
        .map(|(_, tq)| tq.z.abs())
        .fold(0.0, f64::max);
    Ok(Success { success: peak_tz >= tz_threshold, peak_tz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::DhJoint;
    use approx::assert_abs_diff_eq;

    fn model(d: usize, lim: f64) -> RobotModel {
        let mut m = RobotModel::unlimited(vec![DhJoint { a: 0.1, alpha: 0.0, d: 0.0, theta_offset: 0.0 }; d]);
        m.tau_lim = vec![lim; d];
        m
    }

    fn constant_command(q: DVector<f64>, duration: f64) -> JointTrajectory {
        JointTrajectory { times: vec![0.0, duration], states: vec![q.clone(), q], err_lin: vec![0.0; 2], err_ang: vec![0.0; 2] }
    }

    #[test]
    fn impedance_examples() {
        let mut cfg = ReplayConfig::uniform(3, 10.0, 1.0);
        cfg.delta_q = DVector::from_vec(vec![0.01, -0.02, 0.0]);
        let qc = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let q = &qc + &cfg.delta_q;
        assert_eq!(impedance_torque(&cfg, &qc, &q, &DVector::zeros(3)), DVector::zeros(3));

        let cfg = ReplayConfig::uniform(3, 10.0, 1.0);
        let q = DVector::from_vec(vec![0.0, 0.2, 0.3]);
        let tau = impedance_torque(&cfg, &DVector::from_vec(vec![0.1, 0.2, 0.3]), &q, &DVector::zeros(3));
        assert_abs_diff_eq!(tau[0], 1.0, epsilon = 1e-15);
        assert_eq!(tau[1], 0.0);

        let tau = impedance_torque(&cfg, &DVector::from_element(3, 0.5), &DVector::zeros(3), &DVector::zeros(3));
        assert!(tau.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn limit_filter_examples() {
        let lim = [1.0, 1.0, 2.0];
        let tau = DVector::from_vec(vec![0.5, -1.0, 1.9]);
        let (out, ev) = torque_limit_filter(&tau, &lim, TauPolicy::Clamp, 0.0).unwrap();
        assert_eq!(out, tau);
        assert!(ev.is_empty());

        let tau = DVector::from_vec(vec![0.5, -1.0, 4.0]);
        let (out, ev) = torque_limit_filter(&tau, &lim, TauPolicy::Clamp, 0.3).unwrap();
        assert_eq!(out[2], 2.0);
        assert_eq!(ev, vec![ClampEvent { t: 0.3, joint: 2, requested: 4.0 }]);

        let err = torque_limit_filter(&tau, &lim, TauPolicy::Fault, 0.3).unwrap_err();
        assert_eq!(err, Error::TorqueLimitExceeded { joint: 2, t: 0.3, tau: 4.0, limit: 2.0 });
    }

    #[test]
    fn equilibrium_replay_is_still() {
        let m = model(2, 5.0);
        let cfg = ReplayConfig::uniform(2, 50.0, 1.0);
        let cmd = constant_command(DVector::from_vec(vec![0.3, -0.2]), 1.0);
        let r = simulate_replay(&m, &cfg, &cmd, &[0.05, 0.05]).unwrap();
        assert!(r.q.iter().all(|q| q == &cmd.states[0]));
        assert!(r.torque.iter().all(|t| t.amax() == 0.0));
        assert!(r.gripper.iter().all(|&g| g == 0.05));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ReplayConfig::uniform(2, 50.0, 1.0);
        cfg.delta_q[0] = 0.3;
        assert!(cfg.validate(2).is_err());
        assert!(ReplayConfig::uniform(2, -1.0, 1.0).validate(2).is_err());
        assert!(ReplayConfig::uniform(2, 1.0, 1.0).validate(3).is_err());
    }

    fn series(times: &[f64], f: impl Fn(f64) -> [f64; 6], frame: &str) -> WrenchSeries {
        WrenchSeries {
            times: times.to_vec(),
            force: times.iter().map(|&t| { let w = f(t); Vector3::new(w[0], w[1], w[2]) }).collect(),
            torque: times.iter().map(|&t| { let w = f(t); Vector3::new(w[3], w[4], w[5]) }).collect(),
            frame: frame.into(),
        }
    }

    #[test]
    fn mismatch_examples() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let base = |t: f64| [t.sin(), 0.5, 0.0, 0.1 * t, 0.0, t * t];
        let demo = series(&times, base, "R");
        let m = haptic_mismatch(&demo, &demo).unwrap();
        assert!(m.rms.amax() == 0.0 && m.peak.amax() == 0.0);

        let replay = series(&times, |t| { let mut w = base(t); w[0] -= 1.0; w }, "R");
        let m = haptic_mismatch(&demo, &replay).unwrap();
        assert_abs_diff_eq!(m.rms[0], 1.0, epsilon = 1e-12);
        assert!(m.diff.iter().all(|d| (d[0] - 1.0).abs() < 1e-12));

        let other = series(&times, base, "B");
        assert!(matches!(haptic_mismatch(&demo, &other), Err(Error::FrameMismatch(..))));
        let later: Vec<f64> = times.iter().map(|t| t + 10.0).collect();
        assert_eq!(haptic_mismatch(&demo, &series(&later, base, "R")), Err(Error::NoOverlap));
    }

    #[test]
    fn success_truth_table() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let zero = series(&times, |_| [0.0; 6], "R");
        assert!(!classify_success(&zero, 1.0, (0.0, 10.0)).unwrap().success);
        let pulse = series(&times, |t| [0.0, 0.0, 0.0, 0.0, 0.0, if (t - 6.0).abs() < 0.05 { -2.0 } else { 0.0 }], "R");
        assert!(classify_success(&pulse, 1.0, (5.0, 7.0)).unwrap().success);
        assert!(!classify_success(&pulse, 1.0, (1.0, 4.0)).unwrap().success);
        assert!(matches!(classify_success(&pulse, 1.0, (-1.0, 4.0)), Err(Error::WindowOutOfRange(..))));
        assert!(matches!(classify_success(&pulse, 1.0, (4.0, 11.0)), Err(Error::WindowOutOfRange(..))));
    }

    #[test]
    fn wrench_csv_round_trip() {
        let times = [0.0, 0.5, 1.25];
        let w = series(&times, |t| [t, -t, 0.1, 2.0 * t, 0.0, 1e-3], "R");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        w.save(&p).unwrap();
        assert_eq!(WrenchSeries::load(&p).unwrap(), w);
        std::fs::write(&p, "t,fx,fy,fz,tx,ty,tz,frame\n0,0,0,0,0,0,0,R\n1,0,0,0,0,0,0,B\n").unwrap();
        assert!(WrenchSeries::load(&p).is_err());
    }
}
