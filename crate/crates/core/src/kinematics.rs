//! Serial-chain kinematics on standard DH parameters.
//!
//! Jacobian rows are ordered `[linear; angular]`, both expressed in the robot
//! base frame. Joint `i` rotates about the z axis of frame `i-1`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{Pose, Rotation};

/// One standard DH row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DhJoint {
    /// `Rz(theta) Tz(d) Tx(a) Rx(alpha)`
    pub fn transform(&self, q: f64) -> Pose {
        let theta = q + self.theta_offset;
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        let m = nalgebra::Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca);
        Pose::new(Rotation::from_matrix_unchecked(m), Vector3::new(self.a * ct, self.a * st, self.d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub joints: Vec<DhJoint>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub tau_lim: Vec<f64>,
}

impl RobotModel {
    pub fn new(joints: Vec<DhJoint>, q_min: Vec<f64>, q_max: Vec<f64>, tau_lim: Vec<f64>) -> Result<Self> {
        let m = RobotModel { joints, q_min, q_max, tau_lim };
        m.validate()?;
        Ok(m)
    }

    /// Model with the given DH rows, joint limits of +-pi and unit torque limits.
    pub fn unlimited(joints: Vec<DhJoint>) -> Self {
        let n = joints.len();
        RobotModel {
            joints,
            q_min: vec![-std::f64::consts::PI; n],
            q_max: vec![std::f64::consts::PI; n],
            tau_lim: vec![1.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 {
            return Err(Error::InvalidModel("at least one joint required".into()));
        }
        for (name, v) in [("q_min", &self.q_min), ("q_max", &self.q_max), ("tau_lim", &self.tau_lim)] {
            if v.len() != n {
                return Err(Error::InvalidModel(format!("{name} has {} entries, expected {n}", v.len())));
            }
        }
        if self.q_min.iter().zip(&self.q_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidModel("q_min must be below q_max".into()));
        }
        if self.tau_lim.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidModel("tau_lim must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: RobotModel = toml::from_str(s).map_err(|e| Error::InvalidModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RobotModel = toml::from_str(&s).map_err(|e| Error::parse(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn clamp(&self, q: &mut DVector<f64>) {
        for (i, v) in q.iter_mut().enumerate() {
            *v = v.clamp(self.q_min[i], self.q_max[i]);
        }
    }

    pub fn within_limits(&self, q: &DVector<f64>) -> bool {
        q.iter().enumerate().all(|(i, &v)| v >= self.q_min[i] && v <= self.q_max[i])
    }

    fn check(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        Ok(())
    }

    /// Frames `T_0 = I, T_1, ..., T_D` of the chain.
    pub fn frames(&self, q: &DVector<f64>) -> Result<Vec<Pose>> {
        self.check(q)?;
        let mut out = Vec::with_capacity(self.dof() + 1);
        let mut t = Pose::identity();
        out.push(t);
        for (j, &qi) in self.joints.iter().zip(q.iter()) {
            t = t.compose(&j.transform(qi));
            out.push(t);
        }
        Ok(out)
    }
}

/// Joint-angle vector, radians.
pub type JointState = DVector<f64>;

/// End-effector pose in the robot base frame.
pub fn fk(model: &RobotModel, q: &JointState) -> Result<Pose> {
    Ok(*model.frames(q)?.last().unwrap())
}

/// Geometric Jacobian in the base frame, 6 x D.
pub fn jacobian(model: &RobotModel, q: &JointState) -> Result<DMatrix<f64>> {
    let frames = model.frames(q)?;
    Ok(jacobian_from_frames(&frames))
}

fn axis_and_origin(frames: &[Pose], i: usize) -> (Vector3<f64>, Vector3<f64>) {
    let f = &frames[i];
    (f.rot.matrix().column(2).into_owned(), f.pos)
}

fn jacobian_from_frames(frames: &[Pose]) -> DMatrix<f64> {
    let n = frames.len() - 1;
    let p_e = frames[n].pos;
    let mut j = DMatrix::zeros(6, n);
    for i in 0..n {
        let (z, p) = axis_and_origin(frames, i);
        let lin = z.cross(&(p_e - p));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Exact `dJ/dq_k` for every joint `k`.
///
/// With `z_i, p_i` the axis and origin of joint `i` and `p_e` the end effector:
/// `dz_i/dq_k = z_k x z_i` for `k < i` (else 0), `dp_e/dq_k = z_k x (p_e - p_k)`
/// and `dp_i/dq_k = z_k x (p_i - p_k)` for `k < i` (else 0).
pub fn jacobian_partials(model: &RobotModel, q: &JointState) -> Result<Vec<DMatrix<f64>>> {
    let frames = model.frames(q)?;
    Ok(partials_from_frames(&frames))
}

fn partials_from_frames(frames: &[Pose]) -> Vec<DMatrix<f64>> {
    let n = frames.len() - 1;
    let p_e = frames[n].pos;
    let axes: Vec<_> = (0..n).map(|i| axis_and_origin(frames, i)).collect();
    (0..n)
        .map(|k| {
            let (z_k, p_k) = axes[k];
            let mut dj = DMatrix::zeros(6, n);
            for (i, &(z_i, p_i)) in axes.iter().enumerate() {
                let r = p_e - p_i;
                let (dz, dr) = if k < i {
                    (z_k.cross(&z_i), z_k.cross(&r))
                } else {
                    (Vector3::zeros(), z_k.cross(&(p_e - p_k)))
                };
                let dlin = dz.cross(&r) + z_i.cross(&dr);
                dj.fixed_view_mut::<3, 1>(0, i).copy_from(&dlin);
                dj.fixed_view_mut::<3, 1>(3, i).copy_from(&dz);
            }
            dj
        })
        .collect()
}

/// `det(J J^T)` for a Jacobian of any row count.
pub fn gram_determinant(j: &DMatrix<f64>) -> f64 {
    let g = j * j.transpose();
    g.determinant().max(0.0)
}

/// Adjugate of a square matrix from its cofactors; each minor determinant
/// comes from an LU factorization. Well defined when `g` is singular.
pub fn adjugate(g: &DMatrix<f64>) -> DMatrix<f64> {
    let m = g.nrows();
    assert_eq!(m, g.ncols());
    if m == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let mut adj = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            let minor = g.clone().remove_row(r).remove_column(c);
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = cofactor^T
            adj[(c, r)] = sign * minor.determinant();
        }
    }
    adj
}

/// Adjugate of a Gram matrix: `det(G) G^-1` from a Cholesky factor when
/// `G` is comfortably positive definite, exact cofactors otherwise.
pub fn gram_adjugate(g: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = g.clone().cholesky() {
        let d = ch.l_dirty().diagonal().map(|v| v * v);
        let (lo, hi) = (d.min(), d.max());
        if lo > 1e-8 * hi {
            return ch.inverse() * d.product();
        }
    }
    adjugate(g)
}

/// Gradient of `det(J J^T)` w.r.t. the joints, from the Jacobian and its
/// partials: `d det(G) / dq_k = tr(adj(G) (dJ_k J^T + J dJ_k^T)) = 2 <adj(G) J, dJ_k>`.
pub fn gram_determinant_gradient(j: &DMatrix<f64>, partials: &[DMatrix<f64>]) -> DVector<f64> {
    let m = gram_adjugate(&(j * j.transpose())) * j;
    DVector::from_iterator(partials.len(), partials.iter().map(|dj| 2.0 * m.dot(dj)))
}

/// Same contraction without materializing the partials.
fn gram_gradient_from_frames(frames: &[Pose], j: &DMatrix<f64>) -> DVector<f64> {
    let n = frames.len() - 1;
    let p_e = frames[n].pos;
    let m = gram_adjugate(&(j * j.transpose())) * j;
    let axes: Vec<_> = (0..n).map(|i| axis_and_origin(frames, i)).collect();
    DVector::from_iterator(
        n,
        (0..n).map(|k| {
            let (z_k, p_k) = axes[k];
            let tail = z_k.cross(&(p_e - p_k));
            let mut acc = 0.0;
            for (i, &(z_i, p_i)) in axes.iter().enumerate() {
                let r = p_e - p_i;
                let (dz, dr) = if k < i { (z_k.cross(&z_i), z_k.cross(&r)) } else { (Vector3::zeros(), tail) };
                let dlin = dz.cross(&r) + z_i.cross(&dr);
                acc += dlin.dot(&m.fixed_view::<3, 1>(0, i)) + dz.dot(&m.fixed_view::<3, 1>(3, i));
            }
            2.0 * acc
        }),
    )
}

/// `det(J J^T)` of the full 6-row Jacobian.
pub fn manipulability(j: &DMatrix<f64>) -> Result<f64> {
    if j.nrows() != 6 {
        return Err(Error::DimensionMismatch { expected: 6, got: j.nrows() });
    }
    if j.ncols() < 6 {
        return Err(Error::RankDeficientModel(j.ncols()));
    }
    Ok(gram_determinant(j))
}

/// Cost `h = -det(J J^T)`.
pub fn cost_h(model: &RobotModel, q: &JointState) -> Result<f64> {
    Ok(-manipulability(&jacobian(model, q)?)?)
}

/// `grad_q h` in adjugate form; exactly zero where `J J^T` is singular.
pub fn grad_h(model: &RobotModel, q: &JointState) -> Result<DVector<f64>> {
    grad_h_at(&chain_state(model, q)?)
}

/// `grad_q h` reusing an evaluated chain.
pub fn grad_h_at(cs: &ChainState) -> Result<DVector<f64>> {
    if cs.jacobian.ncols() < 6 {
        return Err(Error::RankDeficientModel(cs.jacobian.ncols()));
    }
    Ok(-gram_gradient_from_frames(&cs.frames, &cs.jacobian))
}

/// Everything the motion generator needs at one configuration, from a single
/// pass over the chain.
pub struct ChainState {
    pub pose: Pose,
    pub jacobian: DMatrix<f64>,
    /// Joint frames `T_0 .. T_D`.
    pub frames: Vec<Pose>,
}

pub fn chain_state(model: &RobotModel, q: &JointState) -> Result<ChainState> {
    let frames = model.frames(q)?;
    Ok(ChainState { pose: *frames.last().unwrap(), jacobian: jacobian_from_frames(&frames), frames })
}

/// A 7-DoF anthropomorphic arm (alternating +-pi/2 twists, Gen3-sized links,
/// 0.12 m tool). Shipped as the default model for examples and tests.
pub fn example_7dof() -> RobotModel {
    RobotModel::from_toml_str(EXAMPLE_7DOF_TOML).expect("bundled model is valid")
}

pub const EXAMPLE_7DOF_TOML: &str = include_str!("../../../config/arm7.toml");
