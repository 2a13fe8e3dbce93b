//! Linear Kalman filter over (x, y, θ) fusing localizer fixes with
//! vehicle-frame odometry under a constant-velocity motion model.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfState {
    /// x, y (m), θ (rad).
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
}

impl KfState {
    pub fn new(pose: Pose2, sigma: Matrix3<f64>) -> Self {
        Self {
            mu: Vector3::new(pose.x, pose.y, wrap_angle(pose.theta)),
            sigma,
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.mu.x, self.mu.y, self.mu.z)
    }
}

/// Vehicle-frame velocities held over `dt` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomSample {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub dt: f64,
}

/// Noise settings. Q is a per-second rate scaled by dt at each prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfConfig {
    pub q_diag: [f64; 3],
    /// Measurement covariance diagonal; replaced by a residual fit when available.
    pub r_diag: [f64; 3],
    pub init_sigma_diag: [f64; 3],
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            q_diag: [0.1 * 0.1, 0.1 * 0.1, 0.5f64.to_radians().powi(2)],
            r_diag: [1.0, 1.0, 1f64.to_radians().powi(2)],
            init_sigma_diag: [100.0, 100.0, 10f64.to_radians().powi(2)],
        }
    }
}

impl KfConfig {
    pub fn q(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q_diag))
    }
    pub fn r(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.r_diag))
    }
    pub fn init_sigma(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.init_sigma_diag))
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

fn is_symmetric(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &Matrix3<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Jacobian of the motion model with respect to the state.
pub fn motion_jacobian(theta: f64, odom: &OdomSample) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    let dt = odom.dt;
    Matrix3::new(
        1.0, 0.0, -(odom.vx * s + odom.vy * c) * dt,
        0.0, 1.0, (odom.vx * c - odom.vy * s) * dt,
        0.0, 0.0, 1.0,
    )
}

pub fn kf_predict(state: &KfState, odom: &OdomSample, q: &Matrix3<f64>) -> Result<KfState> {
    if !(odom.dt > 0.0) {
        return Err(Error::input(format!("odometry dt must be positive, got {}", odom.dt)));
    }
    if !is_symmetric(q) || min_eigenvalue(q) < -1e-12 {
        return Err(Error::Config("process noise Q must be symmetric positive semi-definite".into()));
    }
    let th = state.mu.z;
    let (s, c) = th.sin_cos();
    let dt = odom.dt;
    let mu = Vector3::new(
        state.mu.x + (odom.vx * c - odom.vy * s) * dt,
        state.mu.y + (odom.vx * s + odom.vy * c) * dt,
        wrap_angle(th + odom.omega * dt),
    );
    let f = motion_jacobian(th, odom);
    let sigma = symmetrize(&(f * state.sigma * f.transpose() + q * dt));
    Ok(KfState { mu, sigma })
}

/// Joseph-form covariance: (I-K)Σ̄(I-K)ᵀ + K R Kᵀ.
pub fn joseph_covariance(sigma_bar: &Matrix3<f64>, gain: &Matrix3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let a = Matrix3::identity() - gain;
    symmetrize(&(a * sigma_bar * a.transpose() + gain * r * gain.transpose()))
}

/// (I-K)Σ̄, valid only at the optimal gain.
pub fn simple_covariance(sigma_bar: &Matrix3<f64>, gain: &Matrix3<f64>) -> Matrix3<f64> {
    (Matrix3::identity() - gain) * sigma_bar
}

pub fn kalman_gain(sigma_bar: &Matrix3<f64>, r: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let s = symmetrize(&(sigma_bar + r));
    let chol = s.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "innovation covariance is not positive definite (min eigenvalue {:.3e})",
            min_eigenvalue(&s)
        ))
    })?;
    Ok(sigma_bar * chol.inverse())
}

/// Full-state measurement update (H = I) with a wrapped heading innovation.
pub fn kf_update(state: &KfState, z: &Vector3<f64>, r: &Matrix3<f64>) -> Result<KfState> {
    if !is_symmetric(r) || r.cholesky().is_none() {
        return Err(Error::Config("measurement noise R must be symmetric positive definite".into()));
    }
    let k = kalman_gain(&state.sigma, r)?;
    let mut innov = z - state.mu;
    innov.z = wrap_angle(innov.z);
    let mut mu = state.mu + k * innov;
    mu.z = wrap_angle(mu.z);
    Ok(KfState {
        mu,
        sigma: joseph_covariance(&state.sigma, &k, r),
    })
}

/// Diagonal measurement covariance fit to residuals (x, y, θ), floored.
pub fn estimate_measurement_noise(residuals: &[[f64; 3]]) -> Result<Matrix3<f64>> {
    if residuals.len() < 2 {
        return Err(Error::input("need at least two residuals to estimate measurement noise"));
    }
    let n = residuals.len() as f64;
    let mut diag = Vector3::zeros();
    for k in 0..3 {
        let var = if k == 2 {
            // circular mean so residuals straddling ±π stay close together
            let (s, c) = residuals.iter().fold((0.0, 0.0), |(s, c), r| (s + r[2].sin(), c + r[2].cos()));
            let mean = s.atan2(c);
            residuals.iter().map(|r| wrap_angle(r[2] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            let mean = residuals.iter().map(|r| r[k]).sum::<f64>() / n;
            residuals.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        diag[k] = var.max(1e-4);
    }
    Ok(Matrix3::from_diagonal(&diag))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedOdom {
    /// Time at the end of the interval.
    pub t: f64,
    pub odom: OdomSample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedSample {
    pub t: f64,
    pub state: KfState,
    pub updated: bool,
}

/// Predicts on every odometry step and applies each measurement at the step
/// whose timestamp is nearest, provided it lies within half that step's dt.
pub fn fuse_trajectory(
    init: &KfState,
    t0: f64,
    odometry: &[TimedOdom],
    measurements: &[Measurement],
    q: &Matrix3<f64>,
    r: &Matrix3<f64>,
) -> Result<Vec<FusedSample>> {
    let mut prev = t0;
    for (i, o) in odometry.iter().enumerate() {
        if !(o.t > prev) {
            return Err(Error::input(format!("odometry row {i}: timestamp {} not after {prev}", o.t)));
        }
        prev = o.t;
    }
    for i in 1..measurements.len() {
        if measurements[i].t < measurements[i - 1].t {
            return Err(Error::input(format!(
                "measurement row {i}: timestamp {} before {}",
                measurements[i].t,
                measurements[i - 1].t
            )));
        }
    }
    // measurement index -> odometry step
    let mut at_step: Vec<Vec<usize>> = vec![Vec::new(); odometry.len()];
    let mut j = 0;
    for (mi, m) in measurements.iter().enumerate() {
        while j + 1 < odometry.len() && (odometry[j + 1].t - m.t).abs() < (odometry[j].t - m.t).abs() {
            j += 1;
        }
        if let Some(o) = odometry.get(j) {
            if (o.t - m.t).abs() <= 0.5 * o.odom.dt {
                at_step[j].push(mi);
            }
        }
    }
    let mut state = *init;
    let mut out = Vec::with_capacity(odometry.len());
    for (k, o) in odometry.iter().enumerate() {
        state = kf_predict(&state, &o.odom, q)?;
        for &mi in &at_step[k] {
            let p = measurements[mi].pose;
            state = kf_update(&state, &Vector3::new(p.x, p.y, p.theta), r)?;
        }
        out.push(FusedSample {
            t: o.t,
            state,
            updated: !at_step[k].is_empty(),
        });
    }
    Ok(out)
}

/// One row of a `timestamp,x,y,theta[,vx,vy,omega]` stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamRow {
    pub t: f64,
    pub pose: Pose2,
    pub velocity: Option<(f64, f64, f64)>,
}

pub fn read_stream_csv(reader: impl BufRead, what: &str) -> Result<Vec<StreamRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format { what: what.into(), message: e.to_string() })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let with_vel = match cols.as_slice() {
        ["timestamp", "x", "y", "theta"] => false,
        ["timestamp", "x", "y", "theta", "vx", "vy", "omega"] => true,
        _ => {
            return Err(Error::Format {
                what: what.into(),
                message: format!("expected header timestamp,x,y,theta[,vx,vy,omega], found {}", cols.join(",")),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::input(format!("{what}: row {}: {e}", i + 1)))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::input(format!("{what}: row {}: {e}", i + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{what}: row {}: non-finite value", i + 1)));
        }
        rows.push(StreamRow {
            t: vals[0],
            pose: Pose2::new(vals[1], vals[2], vals[3]),
            velocity: with_vel.then(|| (vals[4], vals[5], vals[6])),
        });
    }
    Ok(rows)
}

/// Writes `timestamp,x,y,theta,sxx,syy,stt`.
pub fn write_fused_csv(mut w: impl Write, samples: &[FusedSample]) -> std::io::Result<()> {
    writeln!(w, "timestamp,x,y,theta,sxx,syy,stt")?;
    for s in samples {
        let (m, c) = (s.state.mu, s.state.sigma);
        writeln!(
            w,
            "{:.6},{:.9},{:.9},{:.9},{:.9e},{:.9e},{:.9e}",
            s.t, m.x, m.y, m.z, c[(0, 0)], c[(1, 1)], c[(2, 2)]
        )?;
    }
    Ok(())
}

/// Odometry steps from a velocity-bearing stream: row k supplies the
/// velocities held from its timestamp to the next.
pub fn odometry_from_stream(rows: &[StreamRow]) -> Result<Vec<TimedOdom>> {
    let mut out = Vec::with_capacity(rows.len().saturating_sub(1));
    for (i, w) in rows.windows(2).enumerate() {
        let (vx, vy, omega) = w[0]
            .velocity
            .ok_or_else(|| Error::input(format!("odometry row {} has no velocity columns", i + 1)))?;
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) {
            return Err(Error::input(format!("odometry row {}: timestamps not increasing", i + 2)));
        }
        out.push(TimedOdom { t: w[1].t, odom: OdomSample { vx, vy, omega, dt } });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    fn random_pd(r: &mut impl Rng, scale: f64) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
        a * a.transpose() * scale + Matrix3::identity() * 1e-3 * scale
    }

    #[test]
    fn predict_examples() {
        let s = KfState::new(Pose2::new(1.0, 2.0, 0.3), Matrix3::identity());
        let still = OdomSample { vx: 0.0, vy: 0.0, omega: 0.0, dt: 1.0 };
        let p = kf_predict(&s, &still, &Matrix3::zeros()).unwrap();
        assert_eq!(p, s);

        let fwd = OdomSample { vx: 10.0, vy: 0.0, omega: 0.0, dt: 1.0 };
        let p = kf_predict(&KfState::new(Pose2::IDENTITY, Matrix3::zeros()), &fwd, &Matrix3::zeros()).unwrap();
        assert!((p.mu.x - 10.0).abs() < 1e-12 && p.mu.y.abs() < 1e-12);
        let p = kf_predict(&KfState::new(Pose2::new(0.0, 0.0, FRAC_PI_2), Matrix3::zeros()), &fwd, &Matrix3::zeros()).unwrap();
        assert!(p.mu.x.abs() < 1e-12 && (p.mu.y - 10.0).abs() < 1e-12);

        let bad_q = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(kf_predict(&s, &still, &bad_q), Err(Error::Config(_))));
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let mut r = rng::seeded(1);
        for _ in 0..50 {
            let s = KfState::new(Pose2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-3.0..3.0)), Matrix3::zeros());
            let o = OdomSample { vx: r.random_range(-10.0..10.0), vy: r.random_range(-2.0..2.0), omega: r.random_range(-0.5..0.5), dt: 0.1 };
            let f = motion_jacobian(s.mu.z, &o);
            let h = 1e-6;
            for c in 0..3 {
                let mut a = s;
                a.mu[c] += h;
                let mut b = s;
                b.mu[c] -= h;
                let pa = kf_predict(&a, &o, &Matrix3::zeros()).unwrap().mu;
                let pb = kf_predict(&b, &o, &Matrix3::zeros()).unwrap().mu;
                let mut d = pa - pb;
                d.z = wrap_angle(d.z);
                for row in 0..3 {
                    assert!((d[row] / (2.0 * h) - f[(row, c)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn predict_keeps_covariance_psd_and_volume_non_decreasing() {
        // The shear Jacobian has unit determinant, so det(FΣFᵀ + Q) ≥ det(Σ)
        // for PSD Q; the trace alone is not monotone in general.
        let mut r = rng::seeded(2);
        for _ in 0..200 {
            let mut s = KfState::new(Pose2::new(0.0, 0.0, r.random_range(-3.0..3.0)), random_pd(&mut r, 1.0));
            let q = random_pd(&mut r, 0.01);
            for _ in 0..20 {
                let o = OdomSample { vx: r.random_range(0.0..15.0), vy: r.random_range(-1.0..1.0), omega: r.random_range(-0.3..0.3), dt: 0.1 };
                let next = kf_predict(&s, &o, &q).unwrap();
                assert!(min_eigenvalue(&next.sigma) >= -1e-9);
                assert!(next.sigma.determinant() >= s.sigma.determinant() * (1.0 - 1e-9));
                s = next;
            }
        }
    }

    #[test]
    fn trace_is_not_monotone_counterexample() {
        let sigma = Matrix3::new(1.0, 0.0, 0.9, 0.0, 1.0, 0.0, 0.9, 0.0, 1.0);
        let s = KfState::new(Pose2::IDENTITY, sigma);
        let o = OdomSample { vx: 0.0, vy: 1.0, omega: 0.0, dt: 1.0 };
        let p = kf_predict(&s, &o, &Matrix3::zeros()).unwrap();
        assert!(p.sigma.trace() < s.sigma.trace());
    }

    #[test]
    fn update_examples() {
        let mut r = rng::seeded(3);
        let sb = random_pd(&mut r, 1.0);
        let s = KfState::new(Pose2::new(1.0, 2.0, 0.5), sb);
        let rm = random_pd(&mut r, 0.5);
        let u = kf_update(&s, &s.mu, &rm).unwrap();
        assert!((u.mu - s.mu).amax() < 1e-15);
        assert!(u.sigma.trace() < s.sigma.trace());

        // scalar analogue on the diagonal
        let s = KfState::new(Pose2::IDENTITY, Matrix3::identity());
        let k = kalman_gain(&s.sigma, &Matrix3::identity()).unwrap();
        assert!((k - Matrix3::identity() * 0.5).amax() < 1e-15);
        let u = kf_update(&s, &Vector3::zeros(), &Matrix3::identity()).unwrap();
        assert!((u.sigma - Matrix3::identity() * 0.5).amax() < 1e-15);

        let singular_r = Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 1.0));
        assert!(matches!(kf_update(&s, &Vector3::zeros(), &singular_r), Err(Error::Config(_))));
    }

    #[test]
    fn joseph_matches_simple_at_optimal_gain_and_stays_psd_when_perturbed() {
        let mut r = rng::seeded(4);
        for _ in 0..200 {
            let sb = random_pd(&mut r, 1.0);
            let rm = random_pd(&mut r, 0.3);
            let k = kalman_gain(&sb, &rm).unwrap();
            let j = joseph_covariance(&sb, &k, &rm);
            let s = simple_covariance(&sb, &k);
            assert!((j - s).amax() < 1e-9);
            let kp = k + Matrix3::from_fn(|_, _| r.random_range(-1e-3..1e-3));
            assert!(min_eigenvalue(&joseph_covariance(&sb, &kp, &rm)) >= -1e-9);
        }
    }

    #[test]
    fn simple_form_loses_psd_under_bad_gain() {
        let sb = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1e-8));
        let rm = Matrix3::identity();
        let k = kalman_gain(&sb, &rm).unwrap() + Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1e-3, 0.0, 0.0);
        assert!(min_eigenvalue(&symmetrize(&simple_covariance(&sb, &k))) < 0.0);
        assert!(min_eigenvalue(&joseph_covariance(&sb, &k, &rm)) >= -1e-12);
    }

    #[test]
    fn angle_relabeling_invariance_and_extreme_noise() {
        let mut r = rng::seeded(5);
        let s = KfState::new(Pose2::new(0.0, 0.0, 3.0), random_pd(&mut r, 1.0));
        let z = Vector3::new(1.0, 1.0, -3.0);
        let a = kf_update(&s, &z, &Matrix3::identity()).unwrap();
        let b = kf_update(&s, &Vector3::new(1.0, 1.0, -3.0 + 2.0 * std::f64::consts::PI * 3.0), &Matrix3::identity()).unwrap();
        assert!((a.mu - b.mu).amax() < 1e-9);

        let huge = kf_update(&s, &z, &(Matrix3::identity() * 1e12)).unwrap();
        assert!((huge.mu - s.mu).amax() < 1e-9);
        let tiny = kf_update(&s, &z, &(Matrix3::identity() * 1e-12)).unwrap();
        let mut d = tiny.mu - z;
        d.z = wrap_angle(d.z);
        assert!(d.amax() < 1e-9);
    }

    #[test]
    fn dead_reckoning_without_measurements() {
        let init = KfState::new(Pose2::new(5.0, -2.0, 0.4), Matrix3::identity());
        let odo: Vec<TimedOdom> = (1..=100)
            .map(|k| TimedOdom { t: k as f64 * 0.1, odom: OdomSample { vx: 8.0, vy: 0.2, omega: 0.05, dt: 0.1 } })
            .collect();
        let out = fuse_trajectory(&init, 0.0, &odo, &[], &(Matrix3::identity() * 0.01), &Matrix3::identity()).unwrap();
        let mut p = init.pose();
        for (o, f) in odo.iter().zip(&out) {
            let (s, c) = p.theta.sin_cos();
            p = Pose2::new(p.x + (8.0 * c - 0.2 * s) * 0.1, p.y + (8.0 * s + 0.2 * c) * 0.1, p.theta + 0.005);
            assert_eq!(f.t, o.t);
            assert!(!f.updated);
            assert!((f.state.mu.x - p.x).abs() < 1e-12 && (f.state.mu.y - p.y).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_to_noiseless_measurements() {
        let init = KfState::new(Pose2::new(3.0, 3.0, 0.2), Matrix3::identity() * 100.0);
        let odo: Vec<TimedOdom> = (1..=10)
            .map(|k| TimedOdom { t: k as f64, odom: OdomSample { vx: 1.0, vy: 0.0, omega: 0.0, dt: 1.0 } })
            .collect();
        let meas: Vec<Measurement> = (1..=10).map(|k| Measurement { t: k as f64, pose: Pose2::new(k as f64, 0.0, 0.0) }).collect();
        let out = fuse_trajectory(&init, 0.0, &odo, &meas, &(Matrix3::identity() * 1e-6), &(Matrix3::identity() * 1e-10)).unwrap();
        let last = out.last().unwrap().state;
        assert!((last.mu - Vector3::new(10.0, 0.0, 0.0)).amax() < 1e-6);
        assert!(out.iter().all(|s| s.updated));
    }

    #[test]
    fn out_of_order_rejected() {
        let init = KfState::new(Pose2::IDENTITY, Matrix3::identity());
        let o = OdomSample { vx: 1.0, vy: 0.0, omega: 0.0, dt: 1.0 };
        let odo = [TimedOdom { t: 2.0, odom: o }, TimedOdom { t: 1.0, odom: o }];
        assert!(matches!(fuse_trajectory(&init, 0.0, &odo, &[], &Matrix3::zeros(), &Matrix3::identity()), Err(Error::Input(_))));
    }

    #[test]
    fn noise_estimate_floors_and_wraps() {
        let r = estimate_measurement_noise(&[[0.0, 0.0, 3.1], [0.0, 0.0, -3.1]]).unwrap();
        assert_eq!(r[(0, 0)], 1e-4);
        assert!(r[(2, 2)] < 1.0);
        let mut g = rng::seeded(9);
        let n = Normal::new(0.0, 2.0).unwrap();
        let res: Vec<[f64; 3]> = (0..20000).map(|_| [n.sample(&mut g), 0.0, 0.0]).collect();
        let r = estimate_measurement_noise(&res).unwrap();
        assert!((r[(0, 0)] - 4.0).abs() < 0.15);
    }

    #[test]
    fn stream_csv_round_trip() {
        let text = "timestamp,x,y,theta,vx,vy,omega\n0,0,0,0,1,0,0\n1,1,0,0,1,0,0\n";
        let rows = read_stream_csv(text.as_bytes(), "odo").unwrap();
        assert_eq!(rows.len(), 2);
        let odo = odometry_from_stream(&rows).unwrap();
        assert_eq!(odo[0], TimedOdom { t: 1.0, odom: OdomSample { vx: 1.0, vy: 0.0, omega: 0.0, dt: 1.0 } });
        assert!(read_stream_csv("a,b\n1,2\n".as_bytes(), "x").is_err());
        assert!(read_stream_csv("timestamp,x,y,theta\n0,NaN,0,0\n".as_bytes(), "x").is_err());
        let mut buf = Vec::new();
        write_fused_csv(&mut buf, &[FusedSample { t: 1.0, state: KfState::new(Pose2::IDENTITY, Matrix3::identity()), updated: false }]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("timestamp,x,y,theta,sxx,syy,stt\n1.000000,"));
    }
}
