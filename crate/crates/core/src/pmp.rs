//! First-order passive-motion joint trajectory generation.
//!
//! A virtual task-space force built from the pose error is mapped through
//! `J^T` and integrated as a joint admittance, while the manipulability cost
//! `h = -det(J J^T)` is descended with weight `lambda`:
//!
//! `q' = gamma * (J^T Pi_base - lambda * grad h)`
//!
//! `Pi` is formed in the end-effector frame and rotated into the base frame
//! before the `J^T` mapping, since the Jacobian is a base-frame Jacobian.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::io::{csv_line, write_atomic, Table};
use crate::kinematics::{chain_state, grad_h_at, JointState, RobotModel};
use crate::markers::DemoTrajectory;
use crate::se3::{orientation_error, rotation_slerp, Pose};

/// Generalized task force, `[linear; rotational]`, end-effector frame.
pub type TaskCommand = Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmpGains {
    pub k_l: f64,
    pub k_r: f64,
    /// Joint admittance, rad/s per unit generalized torque.
    pub gamma: f64,
    /// Weight on the manipulability cost gradient.
    pub lambda: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for PmpGains {
    fn default() -> Self {
        PmpGains { k_l: 1000.0, k_r: 100.0, gamma: 1.0, lambda: 1e-3, dt: 1e-3 }
    }
}

impl PmpGains {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k_l > 0.0 && self.k_r > 0.0 && self.gamma > 0.0 && self.lambda >= 0.0 && self.dt > 0.0;
        if ok && [self.k_l, self.k_r, self.gamma, self.lambda, self.dt].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid PMP gains {self:?}")))
        }
    }
}

/// Knobs of the motion generator that are not gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmpOptions {
    /// Project the cost gradient onto the Jacobian null space.
    pub null_space_projection: bool,
    /// Linear error norm fed into `Pi` is clipped to this (m).
    pub max_linear_error: f64,
    /// Angular error norm fed into `Pi` is clipped to this (rad).
    pub max_angular_error: f64,
    /// Linear tracking error that counts as divergence (m).
    pub divergence_bound: f64,
    /// Time allowed to converge onto the first demo pose before tracking (s).
    pub settle_time: f64,
    /// Settling ends early once both errors fall below this.
    pub settle_tolerance: f64,
}

impl Default for PmpOptions {
    fn default() -> Self {
        PmpOptions {
            null_space_projection: false,
            max_linear_error: 0.05,
            max_angular_error: 0.5,
            divergence_bound: 0.2,
            settle_time: 2.0,
            settle_tolerance: 1e-7,
        }
    }
}

/// `Pi = [k_l R^T (p_G - p); k_r log(R^T R_G)]`.
pub fn task_command(current: &Pose, target: &Pose, k_l: f64, k_r: f64) -> Result<TaskCommand> {
    let lin = current.rot.transpose().apply(&(target.pos - current.pos)) * k_l;
    let ang = orientation_error(&current.rot, &target.rot)? * k_r;
    Ok(Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z))
}

fn clip(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Pose errors at `q`: (linear m, angular rad).
pub fn tracking_error(model: &RobotModel, q: &JointState, target: &Pose) -> Result<(f64, f64)> {
    let cur = chain_state(model, q)?.pose;
    Ok(((target.pos - cur.pos).norm(), orientation_error(&cur.rot, &target.rot)?.norm()))
}

/// One explicit Euler step of the admittance law with default options.
pub fn pmp_step(model: &RobotModel, q: &JointState, target: &Pose, gains: &PmpGains) -> Result<JointState> {
    pmp_step_with(model, q, target, gains, &PmpOptions::default())
}

pub fn pmp_step_with(
    model: &RobotModel,
    q: &JointState,
    target: &Pose,
    gains: &PmpGains,
    opts: &PmpOptions,
) -> Result<JointState> {
    let cs = chain_state(model, q)?;
    let rot = cs.pose.rot;
    // errors in the end-effector frame, clipped, then weighted
    let e_lin = clip(rot.transpose().apply(&(target.pos - cs.pose.pos)), opts.max_linear_error);
    let e_ang = clip(orientation_error(&rot, &target.rot)?, opts.max_angular_error);
    let lin_base = rot.apply(&(e_lin * gains.k_l));
    let ang_base = rot.apply(&(e_ang * gains.k_r));
    let pi_base = Vector6::new(lin_base.x, lin_base.y, lin_base.z, ang_base.x, ang_base.y, ang_base.z);

    let mut tau = cs.jacobian.tr_mul(&pi_base);
    if gains.lambda > 0.0 {
        let mut g = grad_h_at(&cs)?;
        if opts.null_space_projection {
            g = null_space_project(&cs.jacobian, &g);
        }
        tau -= g * gains.lambda;
    }
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PMP joint torque"));
    }
    let mut next = q + tau * (gains.gamma * gains.dt);
    model.clamp(&mut next);
    Ok(next)
}

/// `(I - J^+ J) v`
fn null_space_project(j: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let pinv = j.clone().pseudo_inverse(1e-12).expect("pseudo-inverse of a finite matrix");
    v - &pinv * (j * v)
}

/// Solved joint trajectory at the demonstration sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<JointState>,
    pub err_lin: Vec<f64>,
    pub err_ang: Vec<f64>,
}

impl JointTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Linear interpolation of the joint state, clamped at the ends.
    pub fn sample(&self, t: f64) -> JointState {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let k = self.times.partition_point(|&x| x <= t) - 1;
        let s = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        &self.states[k] + (&self.states[k + 1] - &self.states[k]) * s
    }

    pub fn to_csv(&self) -> String {
        let d = self.dof();
        let mut s = String::from("t");
        for i in 1..=d {
            s.push_str(&format!(",q{i}"));
        }
        s.push_str(",err_lin,err_ang\n");
        for k in 0..self.len() {
            let row = std::iter::once(self.times[k])
                .chain(self.states[k].iter().copied())
                .chain([self.err_lin[k], self.err_ang[k]]);
            s.push_str(&csv_line(row));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        let ncol = t.header.len();
        if ncol < 4 || t.header[0] != "t" || t.header[ncol - 2] != "err_lin" || t.header[ncol - 1] != "err_ang" {
            return Err(t.error("expected header t,q1..qD,err_lin,err_ang".into()));
        }
        let d = ncol - 3;
        for i in 0..d {
            if t.header[i + 1] != format!("q{}", i + 1) {
                return Err(t.error(format!("expected column q{}", i + 1)));
            }
        }
        let mut jt = JointTrajectory { times: vec![], states: vec![], err_lin: vec![], err_ang: vec![] };
        for row in 0..t.rows.len() {
            jt.times.push(t.f64_at(row, 0)?);
            jt.states.push(DVector::from_iterator(d, (0..d).map(|i| t.f64_at(row, i + 1)).collect::<Result<Vec<_>>>()?));
            jt.err_lin.push(t.f64_at(row, d + 1)?);
            jt.err_ang.push(t.f64_at(row, d + 2)?);
        }
        if jt.is_empty() || jt.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(t.error("times must be non-empty and strictly increasing".into()));
        }
        Ok(jt)
    }
}

/// Tracks `demo` with the robot base at the world origin.
pub fn solve_trajectory(model: &RobotModel, q0: &JointState, demo: &DemoTrajectory, gains: &PmpGains) -> Result<JointTrajectory> {
    solve_trajectory_at(model, &Pose::identity(), q0, demo, gains, &PmpOptions::default())
}

/// Tracks `demo` (world frame) with the robot base at `base`, i.e. the
/// end-effector pose is `base * fk(q)`.
///
/// The robot first converges onto the first demo pose for at most
/// `settle_time`; it then follows the demonstration, taking as many substeps
/// of at most `gains.dt` per sample interval as needed, with the target
/// interpolated linearly in position and geodesically in rotation.
pub fn solve_trajectory_at(
    model: &RobotModel,
    base: &Pose,
    q0: &JointState,
    demo: &DemoTrajectory,
    gains: &PmpGains,
    opts: &PmpOptions,
) -> Result<JointTrajectory> {
    gains.validate()?;
    if demo.is_empty() {
        return Err(Error::InvalidDataset("empty demonstration".into()));
    }
    if q0.len() != model.dof() {
        return Err(Error::DimensionMismatch { expected: model.dof(), got: q0.len() });
    }
    let to_robot = base.inverse();
    let targets: Vec<Pose> = demo.poses.iter().map(|p| to_robot.compose(p)).collect();

    let mut q = q0.clone();
    model.clamp(&mut q);
    let settle_steps = (opts.settle_time / gains.dt).round() as usize;
    for _ in 0..settle_steps {
        let (el, ea) = tracking_error(model, &q, &targets[0])?;
        if el < opts.settle_tolerance && ea < opts.settle_tolerance {
            break;
        }
        q = pmp_step_with(model, &q, &targets[0], gains, opts)?;
    }

    let n = demo.len();
    let mut out = JointTrajectory {
        times: demo.times.clone(),
        states: Vec::with_capacity(n),
        err_lin: Vec::with_capacity(n),
        err_ang: Vec::with_capacity(n),
    };
    let record = |q: &JointState, k: usize, out: &mut JointTrajectory| -> Result<()> {
        let (el, ea) = tracking_error(model, q, &targets[k])?;
        if !(el <= opts.divergence_bound) {
            return Err(Error::DivergedTracking { t: demo.times[k], error: el, bound: opts.divergence_bound });
        }
        out.states.push(q.clone());
        out.err_lin.push(el);
        out.err_ang.push(ea);
        Ok(())
    };
    record(&q, 0, &mut out)?;

    for k in 0..n - 1 {
        let span = demo.times[k + 1] - demo.times[k];
        let steps = ((span / gains.dt) - 1e-9).ceil().max(1.0) as usize;
        let mut sub = *gains;
        sub.dt = span / steps as f64;
        let (a, b) = (&targets[k], &targets[k + 1]);
        for j in 1..=steps {
            let s = j as f64 / steps as f64;
            let target = if j == steps {
                *b
            } else {
                Pose::new(rotation_slerp(&a.rot, &b.rot, s)?, a.pos + (b.pos - a.pos) * s)
            };
            q = pmp_step_with(model, &q, &target, &sub, opts)?;
        }
        record(&q, k + 1, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{example_7dof, fk, manipulability, jacobian, DhJoint};
    use crate::se3::{Rotation, so3_exp};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn q_ready() -> JointState {
        DVector::from_vec(vec![0.1, 0.6, -0.1, 1.6, 0.1, 0.9, 0.0])
    }

    #[test]
    fn task_command_examples() {
        let p = Pose::new(Rotation::about_x(0.3), Vector3::new(0.2, 0.1, 0.0));
        assert_eq!(task_command(&p, &p, 5.0, 3.0).unwrap(), Vector6::zeros());

        let cur = Pose::identity();
        let tgt = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let pi = task_command(&cur, &tgt, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(pi, Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-15);

        // R^T [0.1, 0, 0] with R = Rz(90 deg) is [0, -0.1, 0]
        let cur = Pose::new(Rotation::about_z(FRAC_PI_2), Vector3::zeros());
        let tgt = Pose::new(Rotation::about_z(FRAC_PI_2), Vector3::new(0.1, 0.0, 0.0));
        let pi = task_command(&cur, &tgt, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(pi, Vector6::new(0.0, -0.2, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_error_is_exact_fixed_point() {
        let m = example_7dof();
        let q = q_ready();
        let target = fk(&m, &q).unwrap();
        let gains = PmpGains { lambda: 0.0, ..Default::default() };
        assert_eq!(pmp_step(&m, &q, &target, &gains).unwrap(), q);
    }

    #[test]
    fn single_joint_first_order_response() {
        // one revolute joint with a lever so that orientation and position both pull
        let m = RobotModel::unlimited(vec![DhJoint { a: 0.3, alpha: 0.0, d: 0.0, theta_offset: 0.0 }]);
        let target = fk(&m, &DVector::from_vec(vec![0.1])).unwrap();
        let gains = PmpGains { lambda: 0.0, ..Default::default() };
        let mut q = DVector::zeros(1);
        let mut prev = 0.0;
        for _ in 0..200 {
            q = pmp_step(&m, &q, &target, &gains).unwrap();
            assert!(q[0] >= prev && q[0] <= 0.1 + 1e-12);
            prev = q[0];
        }
        assert!((q[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn cost_descent_moves_in_null_space() {
        let m = example_7dof();
        let q = q_ready();
        let target = fk(&m, &q).unwrap();
        let gains = PmpGains { lambda: 1.0, ..Default::default() };
        let det0 = manipulability(&jacobian(&m, &q).unwrap()).unwrap();
        let mut qk = q.clone();
        for _ in 0..2000 {
            qk = pmp_step(&m, &qk, &target, &gains).unwrap();
        }
        let det1 = manipulability(&jacobian(&m, &qk).unwrap()).unwrap();
        let (el, ea) = tracking_error(&m, &qk, &target).unwrap();
        assert!(det1 > det0, "{det0} -> {det1}");
        assert!(el < 1e-4 && ea < 1e-3, "{el} {ea}");
        assert!((&qk - &q).norm() > 1e-4, "{}", (&qk - &q).norm());
    }

    #[test]
    fn constant_demo_stays_put() {
        let m = example_7dof();
        let q0 = q_ready();
        let p = fk(&m, &q0).unwrap();
        let demo = DemoTrajectory::new(vec![0.0, 0.01, 0.02], vec![p; 3], vec![0.0; 3]).unwrap();
        let gains = PmpGains { lambda: 0.0, ..Default::default() };
        let jt = solve_trajectory(&m, &q0, &demo, &gains).unwrap();
        for (s, e) in jt.states.iter().zip(&jt.err_lin) {
            assert_eq!(s, &q0);
            assert_eq!(*e, 0.0);
        }
    }

    #[test]
    fn unreachable_demo_diverges() {
        let m = example_7dof();
        let p = Pose::from_translation(Vector3::new(2.5, 0.0, 0.3));
        let demo = DemoTrajectory::new(vec![0.0, 0.01], vec![p; 2], vec![0.0; 2]).unwrap();
        let err = solve_trajectory(&m, &q_ready(), &demo, &PmpGains::default()).unwrap_err();
        assert!(matches!(err, Error::DivergedTracking { .. }));
    }

    #[test]
    fn static_target_converges_monotonically() {
        let m = example_7dof();
        let q = q_ready();
        let start = fk(&m, &q).unwrap();
        let target = Pose::new(start.rot * so3_exp(&Vector3::new(0.05, -0.03, 0.02)), start.pos + Vector3::new(0.02, -0.01, 0.015));
        let gains = PmpGains { lambda: 0.0, ..Default::default() };
        let mut qk = q;
        let mut errs = Vec::new();
        for _ in 0..5000 {
            qk = pmp_step(&m, &qk, &target, &gains).unwrap();
            let (el, ea) = tracking_error(&m, &qk, &target).unwrap();
            errs.push((el * el + ea * ea).sqrt());
        }
        let from = errs.len() / 5;
        for w in errs[from..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
        assert!(errs.last().unwrap() < &1e-9, "{:?}", &errs[errs.len() - 3..]);
    }

    #[test]
    fn joint_trajectory_csv_round_trip() {
        let jt = JointTrajectory {
            times: vec![0.0, 0.5],
            states: vec![DVector::from_vec(vec![0.1, -0.2]), DVector::from_vec(vec![0.3, 0.4])],
            err_lin: vec![0.0, 1e-4],
            err_ang: vec![0.0, 2e-5],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.csv");
        jt.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("t,q1,q2,err_lin,err_ang\n"));
        assert_eq!(JointTrajectory::load(&p).unwrap(), jt);
        assert_abs_diff_eq!(jt.sample(0.25)[0], 0.2, epsilon = 1e-15);
    }
}
