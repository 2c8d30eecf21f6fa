//! Demonstration statistics: a full-covariance Gaussian mixture over
//! `[t, p, r, d]` samples of all trials, and time-conditioned regression.
//!
//! Columns are standardized before EM, so `reg` and the k-means++ seeding
//! are scale free; the fitted mixture is mapped back to physical units.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_line, write_atomic};
use crate::markers::DemoTrajectory;
use crate::se3::{so3_exp, so3_log, so3_log_near, Pose};

/// Column layout of a dataset row.
pub const DATA_DIM: usize = 8;
pub const SPATIAL_DIM: usize = 7;

/// Samples of all trials, one row `[t, px, py, pz, rx, ry, rz, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub samples: DMatrix<f64>,
    pub trial_ids: Vec<usize>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Rows belonging to one trial, in time order.
    pub fn trial(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.trial_ids.iter().enumerate().filter(move |(_, &t)| t == id).map(|(i, _)| i)
    }
}

/// Concatenates trials into one dataset. Within a trial the rotation
/// logarithm follows the branch closest to the previous sample, so the
/// rotation-vector columns stay continuous through angle pi.
pub fn build_dataset(trials: &[DemoTrajectory]) -> Result<DemoDataset> {
    if trials.is_empty() {
        return Err(Error::InvalidDataset("no trials".into()));
    }
    let n: usize = trials.iter().map(|t| t.len()).sum();
    let mut samples = DMatrix::zeros(n, DATA_DIM);
    let mut trial_ids = Vec::with_capacity(n);
    let mut row = 0;
    for (id, trial) in trials.iter().enumerate() {
        trial.validate()?;
        let mut prev: Option<Vector3<f64>> = None;
        for k in 0..trial.len() {
            let pose = &trial.poses[k];
            let r = match prev {
                None => so3_log(&pose.rot)?,
                Some(p) => so3_log_near(&pose.rot, &p),
            };
            prev = Some(r);
            let vals = [trial.times[k], pose.pos.x, pose.pos.y, pose.pos.z, r.x, r.y, r.z, trial.aperture[k]];
            for (c, v) in vals.iter().enumerate() {
                samples[(row, c)] = *v;
            }
            trial_ids.push(id);
            row += 1;
        }
    }
    Ok(DemoDataset { samples, trial_ids })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureFile {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major.
    covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.dim();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidDataset("mixture component counts differ".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDataset("mixture weights must be non-negative and sum to one".into()));
        }
        for (m, c) in self.means.iter().zip(&self.covariances) {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::InvalidDataset("mixture dimensions differ".into()));
            }
            if Cholesky::new(c.clone()).is_none() {
                return Err(Error::InvalidDataset("covariance is not positive definite".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let f = MixtureFile {
            dim: self.dim(),
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("mixture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: MixtureFile = serde_json::from_str(s).map_err(|e| Error::InvalidDataset(e.to_string()))?;
        let d = f.dim;
        let means = f.means.into_iter().map(DVector::from_vec).collect();
        let mut covariances = Vec::new();
        for rows in f.covariances {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidDataset("covariance shape does not match dim".into()));
            }
            covariances.push(DMatrix::from_row_iterator(d, d, rows.into_iter().flatten()));
        }
        let g = GaussianMixture { weights: f.weights, means, covariances };
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GaussianMixture::from_json(&s).map_err(|e| Error::parse(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub seed: u64,
    /// Added to the diagonal of every covariance, in standardized units.
    pub reg: f64,
    /// Stop once the mean per-sample log-likelihood gains less than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { k: 16, seed: 0, reg: 1e-6, tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Mean per-sample log-likelihood (physical units) before each M-step and
    /// after the last one.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits the mixture to the dataset rows.
pub fn em_fit(data: &DemoDataset, cfg: &EmConfig) -> Result<EmFit> {
    fit_gmm(&data.samples, cfg)
}

struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
        let scale = DVector::from_iterator(
            x.ncols(),
            x.column_iter().zip(mean.iter()).map(|(c, m)| {
                let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-12 * m.abs().max(1.0) {
                    s
                } else {
                    1.0
                }
            }),
        );
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.scale[j]);
        }
        z
    }

    fn log_jacobian(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn restore(&self, g: GaussianMixture) -> GaussianMixture {
        let d = DMatrix::from_diagonal(&self.scale);
        GaussianMixture {
            weights: g.weights,
            means: g.means.into_iter().map(|m| m.component_mul(&self.scale) + &self.mean).collect(),
            covariances: g.covariances.into_iter().map(|c| &d * c * &d).collect(),
        }
    }
}

/// Per-component Cholesky factors and log normalizers.
struct Factored {
    chol: Vec<Cholesky<f64, Dyn>>,
    log_norm: Vec<f64>,
}

fn factor(g: &GaussianMixture) -> Result<Factored> {
    let d = g.dim() as f64;
    let mut chol = Vec::with_capacity(g.k());
    let mut log_norm = Vec::with_capacity(g.k());
    for (k, c) in g.covariances.iter().enumerate() {
        let ch = Cholesky::new(c.clone()).ok_or(Error::DegenerateComponent { component: k, weight: g.weights[k] })?;
        let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        log_norm.push(g.weights[k].ln() - 0.5 * (d * (2.0 * PI).ln() + log_det));
        chol.push(ch);
    }
    Ok(Factored { chol, log_norm })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Responsibilities (N x K) and total log-likelihood.
fn e_step(z: &DMatrix<f64>, g: &GaussianMixture) -> Result<(DMatrix<f64>, f64)> {
    let f = factor(g)?;
    let n = z.nrows();
    let k = g.k();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = z.row(i).transpose();
            let lp: Vec<f64> = (0..k)
                .map(|c| {
                    let y = f.chol[c].l_dirty().solve_lower_triangular(&(&x - &g.means[c])).expect("non-singular factor");
                    f.log_norm[c] - 0.5 * y.norm_squared()
                })
                .collect();
            let lse = log_sum_exp(&lp);
            (lp.into_iter().map(|v| (v - lse).exp()).collect(), lse)
        })
        .collect();
    let mut resp = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    for (i, (r, lse)) in rows.into_iter().enumerate() {
        for (c, v) in r.into_iter().enumerate() {
            resp[(i, c)] = v;
        }
        ll += lse;
    }
    Ok((resp, ll))
}

fn m_step(z: &DMatrix<f64>, resp: &DMatrix<f64>, reg: f64) -> GaussianMixture {
    let (n, d) = z.shape();
    let k = resp.ncols();
    let nk: Vec<f64> = resp.column_iter().map(|c| c.sum()).collect();
    let total: f64 = nk.iter().sum();
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let mut mu = DVector::zeros(d);
        for i in 0..n {
            mu.axpy(resp[(i, c)], &z.row(i).transpose(), 1.0);
        }
        mu /= nk[c].max(f64::MIN_POSITIVE);
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let dx = z.row(i).transpose() - &mu;
            cov.ger(resp[(i, c)], &dx, &dx, 1.0);
        }
        cov /= nk[c].max(f64::MIN_POSITIVE);
        for j in 0..d {
            cov[(j, j)] += reg;
        }
        // exact symmetry
        cov = (&cov + cov.transpose()) * 0.5;
        means.push(mu);
        covariances.push(cov);
    }
    GaussianMixture { weights: nk.iter().map(|v| v / total).collect(), means, covariances }
}

/// k-means++ seeding followed by a few Lloyd iterations; returns hard labels.
fn kmeans_labels(z: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = z.nrows();
    let dist2 = |i: usize, c: &DVector<f64>| (z.row(i).transpose() - c).norm_squared();
    let mut centers: Vec<DVector<f64>> = vec![z.row(rng.random_range(0..n)).transpose()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if u < *v {
                    idx = i;
                    break;
                }
                u -= v;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = z.row(pick).transpose();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(dist2(i, &c));
        }
        centers.push(c);
    }
    let mut labels = vec![0; n];
    for _ in 0..10 {
        for (i, l) in labels.iter_mut().enumerate() {
            *l = (0..k).min_by(|&a, &b| dist2(i, &centers[a]).total_cmp(&dist2(i, &centers[b]))).unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                *center = members.iter().map(|&i| z.row(i).transpose()).sum::<DVector<f64>>() / members.len() as f64;
            }
        }
    }
    labels
}

/// EM on an arbitrary N x D data matrix.
pub fn fit_gmm(x: &DMatrix<f64>, cfg: &EmConfig) -> Result<EmFit> {
    let (n, _) = x.shape();
    let k = cfg.k;
    if k == 0 || n < k {
        return Err(Error::InvalidDataset(format!("need at least K = {k} samples, got {n}")));
    }
    if !(cfg.reg > 0.0) {
        return Err(Error::InvalidConfig("reg must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset"));
    }
    let st = Standardizer::new(x);
    let z = st.apply(x);
    let to_mean_ll = |ll: f64| (ll - n as f64 * st.log_jacobian()) / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = kmeans_labels(&z, k, &mut rng);
    let mut resp = DMatrix::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }
    let mut g = m_step(&z, &resp, cfg.reg);
    let mut reseeded = vec![false; k];
    fix_degenerate(&z, &mut g, &mut reseeded)?;

    let (mut resp, ll) = e_step(&z, &g)?;
    let mut history = vec![to_mean_ll(ll)];
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        g = m_step(&z, &resp, cfg.reg);
        fix_degenerate(&z, &mut g, &mut reseeded)?;
        let (r, ll) = e_step(&z, &g)?;
        resp = r;
        let ll = to_mean_ll(ll);
        let gain = ll - history.last().unwrap();
        history.push(ll);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit { mixture: st.restore(g), log_likelihood: history, converged })
}

/// Reseeds a collapsed component once on the worst-explained sample; a
/// second collapse of the same component is an error.
#[allow(clippy::needless_range_loop)]
fn fix_degenerate(z: &DMatrix<f64>, g: &mut GaussianMixture, reseeded: &mut [bool]) -> Result<()> {
    let n = z.nrows();
    let floor = 1.0 / (10.0 * n as f64);
    for c in 0..g.k() {
        let w = g.weights[c];
        if w >= floor && w.is_finite() {
            continue;
        }
        if reseeded[c] {
            return Err(Error::DegenerateComponent { component: c, weight: w });
        }
        reseeded[c] = true;
        let f = factor(g).ok();
        let worst = (0..n)
            .map(|i| {
                let x = z.row(i).transpose();
                let score = match &f {
                    Some(f) => (0..g.k())
                        .filter(|&j| j != c)
                        .map(|j| {
                            let y = f.chol[j].l_dirty().solve_lower_triangular(&(&x - &g.means[j])).unwrap();
                            f.log_norm[j] - 0.5 * y.norm_squared()
                        })
                        .fold(f64::NEG_INFINITY, f64::max),
                    None => 0.0,
                };
                (i, score)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap();
        let d = z.ncols();
        g.means[c] = z.row(worst).transpose();
        g.covariances[c] = DMatrix::identity(d, d);
        g.weights[c] = floor;
        let s: f64 = g.weights.iter().sum();
        g.weights.iter_mut().for_each(|w| *w /= s);
    }
    Ok(())
}

/// Conditional of the mixture at time `t` (input = column 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Component responsibilities at `t`.
    pub h: Vec<f64>,
    /// Every component likelihood fell below 1e-300.
    pub extrapolated: bool,
}

pub fn gmr(model: &GaussianMixture, t: f64) -> Conditional {
    let d = model.dim();
    let ds = d - 1;
    let k = model.k();
    let log_floor = 1e-300f64.ln();
    let mut logp = Vec::with_capacity(k);
    let mut cmeans = Vec::with_capacity(k);
    let mut ccovs = Vec::with_capacity(k);
    for c in 0..k {
        let mu = &model.means[c];
        let sig = &model.covariances[c];
        let var_t = sig[(0, 0)];
        let dt = t - mu[0];
        let lp = -0.5 * ((2.0 * PI * var_t).ln() + dt * dt / var_t);
        logp.push(model.weights[c].ln() + lp);
        let cross = sig.view((1, 0), (ds, 1)).into_owned();
        let m = mu.rows(1, ds).into_owned() + &cross * (dt / var_t);
        let cv = sig.view((1, 1), (ds, ds)).into_owned() - &cross * cross.transpose() / var_t;
        cmeans.push(m);
        ccovs.push(cv);
    }
    let extrapolated = logp.iter().zip(&model.weights).all(|(lp, w)| lp - w.ln() < log_floor);
    let lse = log_sum_exp(&logp);
    let h: Vec<f64> = logp.iter().map(|v| (v - lse).exp()).collect();
    let mut mean = DVector::zeros(ds);
    for c in 0..k {
        mean.axpy(h[c], &cmeans[c], 1.0);
    }
    let mut cov = DMatrix::zeros(ds, ds);
    for c in 0..k {
        let dm = &cmeans[c] - &mean;
        cov += (&ccovs[c] + &dm * dm.transpose()) * h[c];
    }
    cov = (&cov + cov.transpose()) * 0.5;
    Conditional { mean, cov, h, extrapolated }
}

/// Average demonstration: GMR mean and covariance over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressedTrajectory {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    pub extrapolated: Vec<bool>,
}

pub fn regress_trajectory(model: &GaussianMixture, times: &[f64]) -> RegressedTrajectory {
    let out: Vec<Conditional> = times.par_iter().map(|&t| gmr(model, t)).collect();
    let mut r = RegressedTrajectory { times: times.to_vec(), mean: vec![], cov: vec![], extrapolated: vec![] };
    for c in out {
        r.mean.push(c.mean);
        r.cov.push(c.cov);
        r.extrapolated.push(c.extrapolated);
    }
    r
}

impl RegressedTrajectory {
    /// Pose trajectory for the motion generator; aperture clipped at zero.
    pub fn to_demo(&self) -> Result<DemoTrajectory> {
        let poses = self
            .mean
            .iter()
            .map(|m| Pose::new(so3_exp(&Vector3::new(m[3], m[4], m[5])), Vector3::new(m[0], m[1], m[2])))
            .collect();
        let ap = self.mean.iter().map(|m| m[6].max(0.0)).collect();
        DemoTrajectory::new(self.times.clone(), poses, ap)
    }

    /// `t,px,py,pz,rx,ry,rz,d`, the regressed rotation vector as is.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,px,py,pz,rx,ry,rz,d\n");
        for (t, m) in self.times.iter().zip(&self.mean) {
            s.push_str(&csv_line(std::iter::once(*t).chain(m.iter().copied())));
            s.push('\n');
        }
        s
    }
}

/// Trials and the regressed mean in one long table: `series,t,px,...,d`.
pub fn overlay_csv(data: &DemoDataset, reg: &RegressedTrajectory) -> String {
    let mut s = String::from("series,t,px,py,pz,rx,ry,rz,d\n");
    for i in 0..data.len() {
        s.push_str(&format!("trial{},{}\n", data.trial_ids[i], csv_line(data.samples.row(i).iter().copied())));
    }
    for (t, m) in reg.times.iter().zip(&reg.mean) {
        s.push_str(&format!("mean,{}\n", csv_line(std::iter::once(*t).chain(m.iter().copied()))));
    }
    s
}

/// Fraction of GMR samples lying inside the per-time min/max envelope of
/// the trials (all seven spatial dimensions, with absolute slack `eps`).
/// Trials are linearly interpolated; times outside a trial's span are skipped.
pub fn envelope_fraction(data: &DemoDataset, reg: &RegressedTrajectory, eps: f64) -> f64 {
    let ntrials = data.trial_ids.iter().max().map_or(0, |m| m + 1);
    let trials: Vec<Vec<usize>> = (0..ntrials).map(|id| data.trial(id).collect()).collect();
    let mut inside = 0usize;
    let mut counted = 0usize;
    for (t, m) in reg.times.iter().zip(&reg.mean) {
        let mut lo = [f64::INFINITY; SPATIAL_DIM];
        let mut hi = [f64::NEG_INFINITY; SPATIAL_DIM];
        let mut any = false;
        for rows in &trials {
            let t0 = data.samples[(rows[0], 0)];
            let t1 = data.samples[(*rows.last().unwrap(), 0)];
            if *t < t0 || *t > t1 {
                continue;
            }
            let k = rows.partition_point(|&r| data.samples[(r, 0)] <= *t).saturating_sub(1);
            let (a, b) = (rows[k], rows[(k + 1).min(rows.len() - 1)]);
            let ta = data.samples[(a, 0)];
            let tb = data.samples[(b, 0)];
            let s = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
            for j in 0..SPATIAL_DIM {
                let v = data.samples[(a, j + 1)] * (1.0 - s) + data.samples[(b, j + 1)] * s;
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
            any = true;
        }
        if !any {
            continue;
        }
        counted += 1;
        if (0..SPATIAL_DIM).all(|j| m[j] >= lo[j] - eps && m[j] <= hi[j] + eps) {
            inside += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        inside as f64 / counted as f64
    }
}
