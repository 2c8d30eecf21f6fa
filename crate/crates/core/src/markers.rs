//! Gripper pose trajectories from labeled motion-capture markers.
//!
//! Each frame is registered against a rigid marker template (Kabsch with a
//! reflection guard), then smoothed by a first-order filter: the position is
//! exponentially smoothed and the rotation moves a fraction `alpha` along the
//! geodesic towards the new measurement. Finger markers give the aperture.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{csv_line, write_atomic, Table};
use crate::se3::{orientation_error, so3_exp, so3_log, Pose};

/// Markers of one capture frame; absent labels are occluded.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerFrame {
    pub t: f64,
    pub points: BTreeMap<String, Vector3<f64>>,
}

/// Marker positions in the gripper body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTemplate {
    pub ref_points: BTreeMap<String, Vector3<f64>>,
}

/// Time-indexed gripper pose and finger aperture.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
    pub aperture: Vec<f64>,
}

impl DemoTrajectory {
    pub fn new(times: Vec<f64>, poses: Vec<Pose>, aperture: Vec<f64>) -> Result<Self> {
        let d = DemoTrajectory { times, poses, aperture };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::InvalidDataset("empty trajectory".into()));
        }
        if self.poses.len() != n || self.aperture.len() != n {
            return Err(Error::InvalidDataset("times, poses and aperture lengths differ".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidDataset("times must be strictly increasing".into()));
        }
        if self.aperture.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidDataset("aperture must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().unwrap_or(&0.0) - self.times.first().unwrap_or(&0.0)
    }

    /// Left-multiplies every pose by `w`.
    pub fn transformed(&self, w: &Pose) -> DemoTrajectory {
        DemoTrajectory {
            times: self.times.clone(),
            poses: self.poses.iter().map(|p| w.compose(p)).collect(),
            aperture: self.aperture.clone(),
        }
    }

    /// CSV `t,px,py,pz,rx,ry,rz,d`, with `r` the rotation logarithm.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("t,px,py,pz,rx,ry,rz,d\n");
        for i in 0..self.len() {
            let p = &self.poses[i];
            let r = so3_log(&p.rot)?;
            s.push_str(&csv_line([self.times[i], p.pos.x, p.pos.y, p.pos.z, r.x, r.y, r.z, self.aperture[i]]));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        t.expect_header(&["t", "px", "py", "pz", "rx", "ry", "rz", "d"])?;
        let mut times = Vec::new();
        let mut poses = Vec::new();
        let mut ap = Vec::new();
        for row in 0..t.rows.len() {
            let v: Vec<f64> = (0..8).map(|c| t.f64_at(row, c)).collect::<Result<_>>()?;
            times.push(v[0]);
            poses.push(Pose::new(so3_exp(&Vector3::new(v[4], v[5], v[6])), Vector3::new(v[1], v[2], v[3])));
            ap.push(v[7]);
        }
        DemoTrajectory::new(times, poses, ap).map_err(|e| Error::parse(path, e))
    }
}

/// Registration result: pose mapping template points onto observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub pose: Pose,
    pub rms: f64,
    pub used: usize,
}

/// Least-squares rigid fit of the template onto the observed markers that
/// share its labels.
pub fn register_rigid(template: &RigidTemplate, frame: &MarkerFrame) -> Result<Registration> {
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = template
        .ref_points
        .iter()
        .filter_map(|(label, r)| frame.points.get(label).map(|o| (*r, *o)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::TooFewMarkers { present: pairs.len() });
    }
    let n = pairs.len() as f64;
    let c_ref = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let c_obs = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;

    let mut cov_ref = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (r, o) in &pairs {
        let dr = r - c_ref;
        cov_ref += dr * dr.transpose();
        h += (o - c_obs) * dr.transpose();
    }
    if is_collinear(&(cov_ref / n)) {
        return Err(Error::DegenerateGeometry);
    }

    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = crate::se3::Rotation::from_matrix_unchecked(u * d * v_t);
    let pos = c_obs - rot.apply(&c_ref);
    let pose = Pose::new(rot, pos);
    let sq: f64 = pairs.iter().map(|(r, o)| (pose.transform_point(r) - o).norm_squared()).sum();
    Ok(Registration { pose, rms: (sq / n).sqrt(), used: pairs.len() })
}

/// Collinear when the second principal variance vanishes relative to the first.
fn is_collinear(cov: &Matrix3<f64>) -> bool {
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    !(ev[0] > 0.0) || ev[1] / ev[0] <= 1e-6
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    /// Smoothing fraction in (0, 1]; 1 disables smoothing.
    pub alpha: f64,
    /// Finger marker labels used for the aperture.
    pub fingers: Option<(String, String)>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { alpha: 0.3, fingers: None }
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub trajectory: DemoTrajectory,
    /// Raw per-frame registrations, `None` where registration failed.
    pub raw: Vec<Option<Registration>>,
    /// Frames whose pose was held from a neighbour.
    pub held: Vec<bool>,
    /// Frames whose aperture was filled from a neighbour.
    pub aperture_filled: Vec<bool>,
}

pub fn filter_trajectory(frames: &[MarkerFrame], template: &RigidTemplate, cfg: &FilterConfig) -> Result<FilterOutput> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {}", cfg.alpha)));
    }
    let raw: Vec<Option<Registration>> = frames.par_iter().map(|f| register_rigid(template, f).ok()).collect();
    let first = raw.iter().flatten().next().ok_or(Error::NoRegistrableFrames)?;

    let mut poses = Vec::with_capacity(frames.len());
    let mut held = Vec::with_capacity(frames.len());
    let mut state = first.pose;
    for reg in &raw {
        match reg {
            Some(r) => {
                let meas = r.pose;
                let dp = meas.pos - state.pos;
                let dr = orientation_error(&state.rot, &meas.rot)?;
                state = Pose::new(state.rot * so3_exp(&(dr * cfg.alpha)), state.pos + dp * cfg.alpha);
                held.push(false);
            }
            None => held.push(true),
        }
        poses.push(state);
    }

    let (aperture, aperture_filled) = match &cfg.fingers {
        Some((a, b)) => aperture(frames, a, b),
        None => (vec![0.0; frames.len()], vec![false; frames.len()]),
    };
    let trajectory = DemoTrajectory::new(frames.iter().map(|f| f.t).collect(), poses, aperture)?;
    Ok(FilterOutput { trajectory, raw, held, aperture_filled })
}

/// Finger-marker distance per frame. Gaps are forward filled, a leading gap
/// is back filled from the first observation; the flags mark filled samples.
pub fn aperture(frames: &[MarkerFrame], label_a: &str, label_b: &str) -> (Vec<f64>, Vec<bool>) {
    let raw: Vec<Option<f64>> = frames
        .iter()
        .map(|f| match (f.points.get(label_a), f.points.get(label_b)) {
            (Some(a), Some(b)) => Some((a - b).norm()),
            _ => None,
        })
        .collect();
    let first = raw.iter().flatten().next().copied().unwrap_or(0.0);
    let mut last = first;
    let mut values = Vec::with_capacity(raw.len());
    let mut filled = Vec::with_capacity(raw.len());
    for r in raw {
        match r {
            Some(d) => {
                last = d;
                values.push(d);
                filled.push(false);
            }
            None => {
                values.push(last);
                filled.push(true);
            }
        }
    }
    (values, filled)
}

/// Reads long-format marker CSV `t,label,x,y,z`; rows sharing a timestamp
/// form one frame. Frames are returned in time order.
pub fn load_marker_csv(path: &Path) -> Result<Vec<MarkerFrame>> {
    let t = Table::read(path)?;
    parse_marker_table(&t)
}

pub fn parse_marker_table(t: &Table) -> Result<Vec<MarkerFrame>> {
    t.expect_header(&["t", "label", "x", "y", "z"])?;
    let mut frames: Vec<MarkerFrame> = Vec::new();
    for row in 0..t.rows.len() {
        let time = t.f64_at(row, 0)?;
        let label = t.str_at(row, 1)?.to_string();
        let p = Vector3::new(t.f64_at(row, 2)?, t.f64_at(row, 3)?, t.f64_at(row, 4)?);
        match frames.last_mut() {
            Some(f) if f.t == time => {
                f.points.insert(label, p);
            }
            Some(f) if f.t > time => return Err(t.error(format!("row {}: timestamps go backwards", row + 2))),
            _ => frames.push(MarkerFrame { t: time, points: BTreeMap::from([(label, p)]) }),
        }
    }
    Ok(frames)
}

pub fn marker_csv(frames: &[MarkerFrame]) -> String {
    let mut s = String::from("t,label,x,y,z\n");
    for f in frames {
        for (label, p) in &f.points {
            s.push_str(&format!("{},{},{}\n", f.t, label, csv_line([p.x, p.y, p.z])));
        }
    }
    s
}

impl RigidTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        t.expect_header(&["label", "x", "y", "z"])?;
        let mut ref_points = BTreeMap::new();
        for row in 0..t.rows.len() {
            let p = Vector3::new(t.f64_at(row, 1)?, t.f64_at(row, 2)?, t.f64_at(row, 3)?);
            ref_points.insert(t.str_at(row, 0)?.to_string(), p);
        }
        if ref_points.len() < 3 {
            return Err(t.error("template needs at least 3 markers".into()));
        }
        Ok(RigidTemplate { ref_points })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,x,y,z\n");
        for (label, p) in &self.ref_points {
            s.push_str(&format!("{},{}\n", label, csv_line([p.x, p.y, p.z])));
        }
        s
    }
}
