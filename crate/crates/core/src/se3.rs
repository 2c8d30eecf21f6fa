//! Rotation and rigid-transform algebra.
//!
//! Rotations are stored as plain 3x3 matrices; rotation vectors (axis times
//! angle) are `Vector3<f64>`. The logarithm returns the canonical branch with
//! angle in `[0, pi)` and refuses to pick an axis sign when the angle is
//! within the branch tolerance of pi.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Elementwise tolerance for `R^T R = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

/// `so3_log` fails with `AngleNearPi` when `|trace(R) + 1|` is below this.
/// Corresponds to an angle within roughly 1e-3 rad of pi.
pub const PI_BRANCH_TOL: f64 = 1e-6;

/// Axis-angle rotation vector, radians.
pub type RotVec = Vector3<f64>;

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        if is_rotation(&m) {
            Some(Rotation(m))
        } else {
            None
        }
    }

    /// Wraps `m` without validation. Use only for products of valid rotations.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    /// Only meant for ingesting noisy external data.
    pub fn orthonormalize(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn about_x(angle: f64) -> Self {
        so3_exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        so3_exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        so3_exp(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.0)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

fn is_rotation(m: &Matrix3<f64>) -> bool {
    let e = m.transpose() * m - Matrix3::identity();
    e.iter().all(|x| x.abs() <= ROTATION_TOL) && (m.determinant() - 1.0).abs() <= ROTATION_TOL
}

/// Skew-symmetric matrix of `v`, so that `hat(v) * w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula. Accepts any angle; no branch restriction on input.
pub fn so3_exp(r: &RotVec) -> Rotation {
    let theta2 = r.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(r);
    let (a, b) = if theta < 1e-6 {
        // Taylor expansions of sin(t)/t and (1 - cos t)/t^2
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Angle, unit axis and a flag telling whether the axis sign could be
/// resolved from the skew part.
fn angle_axis(m: &Matrix3<f64>) -> (f64, Vector3<f64>, bool) {
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee(&(m - m.transpose())) * 0.5;
    let s = w.norm();
    let theta = s.atan2(c);
    if theta < 1e-6 {
        return (theta, w, true);
    }
    if theta < PI - 0.3 {
        return (theta, w / s, true);
    }
    // Near pi the skew part is small; take the axis from the symmetric part.
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let j = (0..3).max_by(|&x, &y| b[(x, x)].total_cmp(&b[(y, y)])).unwrap();
    let mut axis = b.column(j).into_owned();
    axis /= axis.norm();
    let resolved = s > 1e-12;
    if resolved && axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    (theta, axis, resolved)
}

/// SO(3) logarithm on the canonical branch, `|r| < pi`.
pub fn so3_log(rot: &Rotation) -> Result<RotVec> {
    let m = &rot.0;
    let gap = (m.trace() + 1.0).abs();
    if gap < PI_BRANCH_TOL {
        return Err(Error::AngleNearPi(gap));
    }
    let (theta, axis, _) = angle_axis(m);
    if theta < 1e-6 {
        // axis holds the raw skew vector here: sin(t) * a
        return Ok(axis * (1.0 + theta * theta / 6.0));
    }
    Ok(axis * theta)
}

/// Logarithm on whichever branch lies closest to `reference`.
///
/// Used to keep a sampled rotation-vector curve continuous when it passes
/// through angle pi. Only the exact-pi case with no usable skew part is
/// ambiguous, and then the reference resolves the axis sign.
pub fn so3_log_near(rot: &Rotation, reference: &RotVec) -> RotVec {
    let (theta, axis, resolved) = angle_axis(&rot.0);
    if theta < 1e-6 {
        let r0 = axis * (1.0 + theta * theta / 6.0);
        if reference.norm() < PI {
            return r0;
        }
        // far branch of a small rotation: unit axis taken from the reference
        let dir = reference / reference.norm();
        return pick_nearest(std::iter::once(r0).chain(branches(&dir, theta)), reference);
    }
    let signs: &[f64] = if resolved { &[1.0] } else { &[1.0, -1.0] };
    let candidates = signs.iter().flat_map(|&sg| branches(&(axis * sg), theta));
    pick_nearest(candidates, reference)
}

fn branches(axis: &Vector3<f64>, theta: f64) -> impl Iterator<Item = RotVec> {
    let axis = *axis;
    (-2..=2).map(move |n| axis * (theta + 2.0 * PI * n as f64))
}

fn pick_nearest(cands: impl Iterator<Item = RotVec>, reference: &RotVec) -> RotVec {
    cands
        .min_by(|a, b| (a - reference).norm_squared().total_cmp(&(b - reference).norm_squared()))
        .expect("non-empty candidate set")
}

/// `log(R^T R_goal)`: rotational error of `current` w.r.t. `goal`, in the current frame.
pub fn orientation_error(current: &Rotation, goal: &Rotation) -> Result<RotVec> {
    if current == goal {
        // R^T R is identity only up to rounding
        return Ok(RotVec::zeros());
    }
    so3_log(&(current.transpose() * *goal))
}

/// Geodesic interpolation `a exp(s log(a^T b))`.
pub fn rotation_slerp(a: &Rotation, b: &Rotation, s: f64) -> Result<Rotation> {
    if a == b {
        return Ok(*a);
    }
    let d = orientation_error(a, b)?;
    Ok(*a * so3_exp(&(d * s)))
}

/// Rigid transform: `x -> rot * x + pos`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Rotation,
    pub pos: Vector3<f64>,
}

impl Pose {
    pub fn new(rot: Rotation, pos: Vector3<f64>) -> Self {
        Pose { rot, pos }
    }

    pub fn identity() -> Self {
        Pose { rot: Rotation::identity(), pos: Vector3::zeros() }
    }

    pub fn from_translation(pos: Vector3<f64>) -> Self {
        Pose { rot: Rotation::identity(), pos }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.apply(p) + self.pos
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose { rot: a.rot * b.rot, pos: a.rot.apply(&b.pos) + a.pos }
}

pub fn pose_inverse(a: &Pose) -> Pose {
    let rt = a.rot.transpose();
    Pose { rot: rt, pos: -rt.apply(&a.pos) }
}
