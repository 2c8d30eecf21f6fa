//! Seeded synthetic demonstrations: pose trajectories, marker clouds,
//! paced trial batches and wrench fixtures.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::{fk, RobotModel};
use crate::markers::{DemoTrajectory, MarkerFrame, RigidTemplate};
use crate::replay::WrenchSeries;
use crate::se3::{rotation_slerp, so3_exp, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub pose: Pose,
    pub aperture: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub waypoints: Vec<Waypoint>,
    /// Per-axis position noise on generated poses, m.
    pub noise_sigma_pos: f64,
    /// Per-axis marker noise, m.
    pub noise_sigma_marker: f64,
    /// Sample rate, Hz.
    pub rate: f64,
    pub n_trials: usize,
    /// Std of interior waypoint time shifts between trials, s.
    pub trial_jitter: f64,
    /// Std of the per-trial offset: (position and aperture m, rotation rad).
    pub trial_spread: (f64, f64),
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidConfig("at least two waypoints required".into()));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidConfig("waypoint times must be strictly increasing".into()));
        }
        let (sp, sr) = self.trial_spread;
        if !(self.noise_sigma_pos >= 0.0 && self.noise_sigma_marker >= 0.0 && self.trial_jitter >= 0.0 && sp >= 0.0 && sr >= 0.0) {
            return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
        }
        if !(self.rate > 0.0) {
            return Err(Error::InvalidConfig("rate must be positive".into()));
        }
        if self.waypoints.iter().any(|w| !(w.aperture >= 0.0)) {
            return Err(Error::InvalidConfig("aperture must be non-negative".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().unwrap().t - self.waypoints[0].t
    }
}

/// Quintic rest-to-rest profile `10s^3 - 15s^4 + 6s^5`.
pub fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// Uniform sample times over `[t0, t1]` at `rate`; the last sample is `t1`.
pub fn sample_times(t0: f64, t1: f64, rate: f64) -> Vec<f64> {
    let n = ((t1 - t0) * rate + 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|i| t0 + i as f64 / rate).collect();
    let last = times.last_mut().unwrap();
    if (t1 - *last) * rate < 1e-6 {
        *last = t1;
    } else {
        times.push(t1);
    }
    times
}

fn interpolate(waypoints: &[Waypoint], t: f64) -> Result<(Pose, f64)> {
    let k = waypoints.partition_point(|w| w.t <= t).clamp(1, waypoints.len() - 1) - 1;
    let (a, b) = (&waypoints[k], &waypoints[k + 1]);
    let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
    if s == 0.0 {
        return Ok((a.pose, a.aperture));
    }
    if s == 1.0 {
        return Ok((b.pose, b.aperture));
    }
    let m = min_jerk(s);
    let pos = a.pose.pos + (b.pose.pos - a.pose.pos) * m;
    let rot = rotation_slerp(&a.pose.rot, &b.pose.rot, m)?;
    Ok((Pose::new(rot, pos), a.aperture + (b.aperture - a.aperture) * s))
}

fn trajectory_from(waypoints: &[Waypoint], rate: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<DemoTrajectory> {
    let times = sample_times(waypoints[0].t, waypoints.last().unwrap().t, rate);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut poses = Vec::with_capacity(times.len());
    let mut aperture = Vec::with_capacity(times.len());
    for &t in &times {
        let (mut pose, d) = interpolate(waypoints, t)?;
        if sigma > 0.0 {
            pose.pos += Vector3::from_fn(|_, _| normal.sample(rng));
        }
        poses.push(pose);
        aperture.push(d);
    }
    DemoTrajectory::new(times, poses, aperture)
}

/// Piecewise minimum-jerk positions, geodesic rotations and linear aperture
/// through the waypoints, plus seeded position noise.
pub fn gen_pose_trajectory(spec: &SynthSpec) -> Result<DemoTrajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    trajectory_from(&spec.waypoints, spec.rate, spec.noise_sigma_pos, &mut rng)
}

/// `n_trials` copies with jittered interior waypoint times, a rigid
/// per-trial offset and independent position noise. Offsets are
/// Latin-hypercube stratified across trials so every axis is spread;
/// trial `i` then draws from stream `i + 1` of the seed.
pub fn gen_paced_trials(spec: &SynthSpec) -> Result<Vec<DemoTrajectory>> {
    spec.validate()?;
    if spec.n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    let offsets = trial_offsets(spec);
    (0..spec.n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let mut wps = jitter_waypoints(&spec.waypoints, spec.trial_jitter, &mut rng);
            let (dp, dr, dd) = &offsets[i];
            for w in &mut wps {
                w.pose = Pose::new(w.pose.rot * so3_exp(dr), w.pose.pos + dp);
                w.aperture = (w.aperture + dd).max(0.0);
            }
            trajectory_from(&wps, spec.rate, spec.noise_sigma_pos, &mut rng)
        })
        .collect()
}

/// Per-trial (position, rotation vector, aperture) offsets: on each of the
/// seven axes the trials take a random permutation of equal-probability
/// strata of a zero-mean uniform law with the configured std.
fn trial_offsets(spec: &SynthSpec) -> Vec<(Vector3<f64>, Vector3<f64>, f64)> {
    let n = spec.n_trials;
    let (sp, sr) = spec.trial_spread;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut axis = |sigma: f64| -> Vec<f64> {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        let half_width = sigma * 3f64.sqrt();
        strata.iter().map(|&k| half_width * (2.0 * (k as f64 + rng.random::<f64>()) / n as f64 - 1.0)).collect()
    };
    let cols: Vec<Vec<f64>> = [sp, sp, sp, sr, sr, sr, sp].into_iter().map(&mut axis).collect();
    (0..n)
        .map(|i| (Vector3::new(cols[0][i], cols[1][i], cols[2][i]), Vector3::new(cols[3][i], cols[4][i], cols[5][i]), cols[6][i]))
        .collect()
}

fn jitter_waypoints(wps: &[Waypoint], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Waypoint> {
    let mut out = wps.to_vec();
    if jitter == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, jitter).expect("finite jitter");
    for i in 1..wps.len() - 1 {
        // stay clear of both neighbours so the order is preserved
        let lo = out[i - 1].t + 0.25 * (wps[i].t - wps[i - 1].t);
        let hi = wps[i + 1].t - 0.25 * (wps[i + 1].t - wps[i].t);
        out[i].t = (wps[i].t + normal.sample(rng)).clamp(lo, hi);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSynth {
    pub sigma: f64,
    /// Per-label, per-frame occlusion probability.
    pub dropout: f64,
    /// Finger labels placed at `+-aperture/2` along the body y axis.
    pub fingers: Option<(String, String)>,
    pub seed: u64,
}

impl Default for MarkerSynth {
    fn default() -> Self {
        MarkerSynth { sigma: 0.0, dropout: 0.0, fingers: Some(finger_labels()), seed: 0 }
    }
}

pub fn finger_labels() -> (String, String) {
    ("finger_l".to_string(), "finger_r".to_string())
}

/// Non-coplanar four-marker gripper template.
pub fn default_template() -> RigidTemplate {
    let pts = [
        ("m1", Vector3::new(0.06, 0.0, 0.0)),
        ("m2", Vector3::new(-0.03, 0.05, 0.0)),
        ("m3", Vector3::new(-0.03, -0.05, 0.01)),
        ("m4", Vector3::new(0.0, 0.0, 0.08)),
    ];
    RigidTemplate { ref_points: pts.into_iter().map(|(l, p)| (l.to_string(), p)).collect() }
}

/// Observed markers `pose o template + noise`, with optional dropout and
/// finger markers encoding the aperture.
pub fn gen_marker_frames(traj: &DemoTrajectory, template: &RigidTemplate, cfg: &MarkerSynth) -> Result<Vec<MarkerFrame>> {
    if !(cfg.sigma >= 0.0) || !(0.0..=1.0).contains(&cfg.dropout) {
        return Err(Error::InvalidConfig("marker sigma must be >= 0 and dropout in [0, 1]".into()));
    }
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::with_capacity(traj.len());
    for i in 0..traj.len() {
        let pose = &traj.poses[i];
        let mut points = BTreeMap::new();
        let mut place = |label: &str, body: Vector3<f64>, rng: &mut ChaCha8Rng| {
            let keep = cfg.dropout == 0.0 || rng.random::<f64>() >= cfg.dropout;
            let mut p = pose.transform_point(&body);
            if cfg.sigma > 0.0 {
                p += Vector3::from_fn(|_, _| normal.sample(rng));
            }
            if keep {
                points.insert(label.to_string(), p);
            }
        };
        for (label, r) in &template.ref_points {
            place(label, *r, &mut rng);
        }
        if let Some((a, b)) = &cfg.fingers {
            let half = Vector3::new(0.0, 0.5 * traj.aperture[i], -0.05);
            place(a, half, &mut rng);
            place(b, Vector3::new(0.0, -half.y, half.z), &mut rng);
        }
        frames.push(MarkerFrame { t: traj.times[i], points });
    }
    Ok(frames)
}

/// Wrench fixture in a named frame: a slow force oscillation plus a
/// Gaussian `tau_z` pulse (the insertion twist), with seeded noise.
#[derive(Debug, Clone, PartialEq)]
pub struct WrenchSynth {
    pub duration: f64,
    pub rate: f64,
    pub force_amp: f64,
    pub tz_peak: f64,
    pub tz_center: f64,
    pub tz_width: f64,
    pub noise_sigma: f64,
    pub frame: String,
    pub seed: u64,
}

impl Default for WrenchSynth {
    fn default() -> Self {
        WrenchSynth {
            duration: 25.0,
            rate: 100.0,
            force_amp: 5.0,
            tz_peak: 1.5,
            tz_center: 18.0,
            tz_width: 0.8,
            noise_sigma: 0.0,
            frame: "R".into(),
            seed: 0,
        }
    }
}

pub fn gen_wrench_series(cfg: &WrenchSynth) -> Result<WrenchSeries> {
    if !(cfg.duration > 0.0 && cfg.rate > 0.0 && cfg.tz_width > 0.0 && cfg.noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig("wrench duration, rate and width must be positive".into()));
    }
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let times = sample_times(0.0, cfg.duration, cfg.rate);
    let w = std::f64::consts::TAU / cfg.duration;
    let noise = |rng: &mut ChaCha8Rng| if cfg.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
    let mut force = Vec::with_capacity(times.len());
    let mut torque = Vec::with_capacity(times.len());
    for &t in &times {
        let f = Vector3::new(
            cfg.force_amp * (w * t).sin() + noise(&mut rng),
            0.5 * cfg.force_amp * (w * t).cos() + noise(&mut rng),
            -cfg.force_amp + noise(&mut rng),
        );
        let z = (t - cfg.tz_center) / cfg.tz_width;
        let tq = Vector3::new(noise(&mut rng), noise(&mut rng), cfg.tz_peak * (-0.5 * z * z).exp() + noise(&mut rng));
        force.push(f);
        torque.push(tq);
    }
    let s = WrenchSeries { times, force, torque, frame: cfg.frame.clone() };
    s.validate()?;
    Ok(s)
}

/// `n` replay-side wrench fixtures around `demo`: each trial scales the
/// twist peak by U(0.4, 1.3), shifts it by N(0, 0.3) s, scales the force by
/// U(0.8, 1.2) and adds at least 0.05 N of sensor noise. Trial `i` draws
/// from stream `i + 1` of the seed.
pub fn gen_replay_wrenches(demo: &WrenchSynth, n: usize, seed: u64) -> Result<Vec<WrenchSeries>> {
    let shift = Normal::new(0.0, 0.3).expect("constant std");
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let cfg = WrenchSynth {
                tz_peak: demo.tz_peak * rng.random_range(0.4..1.3),
                tz_center: demo.tz_center + shift.sample(&mut rng),
                force_amp: demo.force_amp * rng.random_range(0.8..1.2),
                noise_sigma: demo.noise_sigma.max(0.05),
                seed: rng.random(),
                ..demo.clone()
            };
            gen_wrench_series(&cfg)
        })
        .collect()
}

/// `n` copies of `q`, each joint perturbed by N(0, sigma); copy `i` draws
/// from stream `i + 1` of the seed.
pub fn perturbed_states(q: &DVector<f64>, n: usize, sigma: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            q.map(|v| if sigma > 0.0 { v + normal.sample(&mut rng) } else { v })
        })
        .collect())
}

/// Ready posture of the shipped 7-DoF arm, well away from singularities.
pub fn ready_posture() -> DVector<f64> {
    DVector::from_vec(vec![0.1, 0.6, -0.1, 1.6, 0.1, 0.9, 0.0])
}

/// Reach-approach-insert-twist-retract demonstration around the end-effector
/// pose of `q` (robot at the origin), lasting `duration` seconds.
pub fn insertion_spec(model: &RobotModel, q: &DVector<f64>, duration: f64, seed: u64) -> Result<SynthSpec> {
    let start = fk(model, q)?;
    let at = |dp: [f64; 3], r: [f64; 3]| Pose::new(start.rot * so3_exp(&Vector3::from(r)), start.pos + Vector3::from(dp));
    let frac = [0.0, 0.2, 0.45, 0.65, 0.8, 1.0];
    let poses = [
        at([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        at([0.05, 0.04, 0.03], [0.05, 0.0, 0.1]),
        at([0.08, 0.06, -0.04], [0.0, 0.08, 0.15]),
        at([0.08, 0.06, -0.07], [0.0, 0.08, 0.45]),
        at([0.04, 0.02, 0.0], [-0.05, 0.0, 0.3]),
        at([0.0, 0.0, 0.02], [0.0, 0.0, 0.0]),
    ];
    let aperture = [0.08, 0.08, 0.02, 0.02, 0.08, 0.08];
    let waypoints = (0..frac.len())
        .map(|i| Waypoint { t: frac[i] * duration, pose: poses[i], aperture: aperture[i] })
        .collect();
    Ok(SynthSpec {
        waypoints,
        noise_sigma_pos: 0.0,
        noise_sigma_marker: 0.0,
        rate: 20.0,
        n_trials: 4,
        trial_jitter: 0.0,
        trial_spread: (0.0, 0.0),
        seed,
    })
}

/// Four paced 25 s trials of the insertion with human-scale variability:
/// 0.25 s timing jitter, 2 cm / 0.1 rad per-trial offsets, 0.5 mm noise.
pub fn paced_spec(model: &RobotModel, q: &DVector<f64>, seed: u64) -> Result<SynthSpec> {
    let mut spec = insertion_spec(model, q, 25.0, seed)?;
    spec.n_trials = 4;
    spec.trial_jitter = 0.25;
    spec.trial_spread = (0.02, 0.1);
    spec.noise_sigma_pos = 5e-4;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::example_7dof;
    use crate::markers::{filter_trajectory, register_rigid, FilterConfig};
    use crate::se3::{so3_log, Rotation};
    use approx::assert_abs_diff_eq;

    fn two_point(a: Pose, b: Pose, t: f64) -> SynthSpec {
        SynthSpec {
            waypoints: vec![Waypoint { t: 0.0, pose: a, aperture: 0.05 }, Waypoint { t, pose: b, aperture: 0.01 }],
            noise_sigma_pos: 0.0,
            noise_sigma_marker: 0.0,
            rate: 100.0,
            n_trials: 1,
            trial_jitter: 0.0,
            trial_spread: (0.0, 0.0),
            seed: 3,
        }
    }

    #[test]
    fn constant_when_waypoints_coincide() {
        let p = Pose::new(Rotation::about_y(2.4), Vector3::new(0.4, 0.1, 0.3));
        let traj = gen_pose_trajectory(&two_point(p, p, 2.0)).unwrap();
        assert!(traj.poses.iter().all(|q| *q == p));
    }

    #[test]
    fn endpoints_are_exact() {
        let a = Pose::new(Rotation::about_y(2.4), Vector3::new(0.4, 0.1, 0.3));
        let b = Pose::new(Rotation::about_z(0.3) * Rotation::about_y(2.0), Vector3::new(0.5, -0.2, 0.25));
        let traj = gen_pose_trajectory(&two_point(a, b, 1.3)).unwrap();
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(*traj.times.last().unwrap(), 1.3);
        assert_eq!(traj.poses[0], a);
        assert_eq!(*traj.poses.last().unwrap(), b);
        assert_eq!(traj.aperture[0], 0.05);
        assert_eq!(*traj.aperture.last().unwrap(), 0.01);
    }

    #[test]
    fn min_jerk_mid_velocity() {
        let (t_total, dp) = (2.0, 0.3);
        let h = 1e-5;
        let x = |t: f64| dp * min_jerk(t / t_total);
        let v = (x(1.0 + h) - x(1.0 - h)) / (2.0 * h);
        assert_abs_diff_eq!(v, 15.0 / 8.0 * dp / t_total, epsilon = 1e-8);
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
    }

    #[test]
    fn seeded_determinism_and_seed_sensitivity() {
        let m = example_7dof();
        let mut spec = insertion_spec(&m, &ready_posture(), 5.0, 11).unwrap();
        spec.noise_sigma_pos = 1e-3;
        spec.trial_jitter = 0.1;
        assert_eq!(gen_paced_trials(&spec).unwrap(), gen_paced_trials(&spec).unwrap());
        let other = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(gen_paced_trials(&spec).unwrap(), gen_paced_trials(&other).unwrap());
    }

    #[test]
    fn noiseless_trials_identical() {
        let m = example_7dof();
        let spec = insertion_spec(&m, &ready_posture(), 25.0, 0).unwrap();
        let trials = gen_paced_trials(&spec).unwrap();
        assert_eq!(trials.len(), 4);
        assert!(trials.iter().all(|t| t == &trials[0]));
        let total: f64 = trials.iter().map(|t| t.duration()).sum();
        assert_eq!(total, 100.0);
    }

    #[test]
    fn noiseless_markers_round_trip() {
        let m = example_7dof();
        let traj = gen_pose_trajectory(&insertion_spec(&m, &ready_posture(), 5.0, 0).unwrap()).unwrap();
        let frames = gen_marker_frames(&traj, &default_template(), &MarkerSynth::default()).unwrap();
        let cfg = FilterConfig { alpha: 1.0, fingers: Some(finger_labels()) };
        let out = filter_trajectory(&frames, &default_template(), &cfg).unwrap();
        for (a, b) in out.trajectory.poses.iter().zip(&traj.poses) {
            assert!((a.pos - b.pos).norm() < 1e-9);
            assert!(so3_log(&(a.rot.transpose() * b.rot)).unwrap().norm() < 1e-9);
        }
        for (a, b) in out.trajectory.aperture.iter().zip(&traj.aperture) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_to_three_markers_still_registers() {
        let m = example_7dof();
        let traj = gen_pose_trajectory(&insertion_spec(&m, &ready_posture(), 1.0, 0).unwrap()).unwrap();
        let mut frames = gen_marker_frames(&traj, &default_template(), &MarkerSynth::default()).unwrap();
        for f in &mut frames {
            f.points.remove("m2");
        }
        for (f, p) in frames.iter().zip(&traj.poses) {
            let r = register_rigid(&default_template(), f).unwrap();
            assert_eq!(r.used, 3);
            assert!((r.pose.pos - p.pos).norm() < 1e-9);
        }
    }

    #[test]
    fn wrench_fixture_shape() {
        let w = gen_wrench_series(&WrenchSynth::default()).unwrap();
        assert_eq!(w.times.len(), 2501);
        let peak = w.torque.iter().map(|t| t.z).fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn replay_fixtures_vary_and_repeat() {
        let a = gen_replay_wrenches(&WrenchSynth::default(), 6, 3).unwrap();
        let b = gen_replay_wrenches(&WrenchSynth::default(), 6, 3).unwrap();
        assert_eq!(a, b);
        let peaks: Vec<f64> = a.iter().map(|w| w.torque.iter().map(|t| t.z).fold(f64::MIN, f64::max)).collect();
        assert!(peaks.iter().all(|p| (0.5..2.2).contains(p)), "{peaks:?}");
        assert!(peaks.windows(2).all(|w| w[0] != w[1]));

        let q = ready_posture();
        let s = perturbed_states(&q, 3, 0.0, 1).unwrap();
        assert!(s.iter().all(|x| *x == q));
        let s = perturbed_states(&q, 3, 0.01, 1).unwrap();
        assert_ne!(s[0], s[1]);
        assert!(s.iter().all(|x| (x - &q).amax() < 0.06));
    }

    #[test]
    fn spec_validation() {
        let p = Pose::identity();
        let mut s = two_point(p, p, 1.0);
        s.waypoints[1].t = 0.0;
        assert!(gen_pose_trajectory(&s).is_err());
        let mut s = two_point(p, p, 1.0);
        s.rate = 0.0;
        assert!(gen_pose_trajectory(&s).is_err());
        let mut s = two_point(p, p, 1.0);
        s.n_trials = 0;
        assert!(gen_paced_trials(&s).is_err());
    }
}
