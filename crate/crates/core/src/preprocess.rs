//! Track smoothing and input-feature assembly.
//!
//! Each axis runs an independent constant-acceleration Kalman filter driven
//! by white jerk noise, followed by a Rauch-Tung-Striebel backward pass.
//! Both axes share one covariance sequence, which is what makes the
//! smoother commute with rotations.

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentTrack, Point, Scene};

/// Features per observed step: X, Y, vX, vY, aX, aY, dt, valid.
pub const FEATURE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Position measurement noise standard deviation, metres.
    pub measurement_sigma: f64,
    /// Jerk process noise standard deviation, m/s^3.
    pub jerk_sigma: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            measurement_sigma: 0.3,
            jerk_sigma: 2.0,
        }
    }
}

/// Prior variance on the initial state; effectively diffuse.
const PRIOR_VAR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicState {
    pub position: Point,
    pub velocity: Point,
    pub acceleration: Point,
    /// Ordered (X, Y, vX, vY, aX, aY).
    pub covariance: Matrix6<f64>,
}

fn transition(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

fn process_noise(dt: f64, q: f64) -> Matrix3<f64> {
    let (d2, d3) = (dt * dt, dt * dt * dt);
    let (d4, d5) = (d3 * dt, d3 * d2);
    q * Matrix3::new(
        d5 / 20.0,
        d4 / 8.0,
        d3 / 6.0,
        d4 / 8.0,
        d3 / 3.0,
        d2 / 2.0,
        d3 / 6.0,
        d2 / 2.0,
        dt,
    )
}

/// Forward filter + RTS smoother over a track's observed steps. Steps with
/// `valid == false` receive the smoother's propagated estimate.
pub fn kalman_smooth(track: &AgentTrack, config: &KalmanConfig) -> Result<Vec<KinematicState>> {
    let n = track.len();
    let first = track.valid.iter().position(|v| *v);
    let n_valid = track.valid.iter().filter(|v| **v).count();
    let Some(first) = first.filter(|_| n_valid >= 2) else {
        return Err(Error::UnusableTrack {
            track: track.id.clone(),
            reason: format!("{n_valid} valid observations, need at least 2"),
        });
    };
    let r = config.measurement_sigma.powi(2);
    let q = config.jerk_sigma.powi(2);

    let mut xs_pred: Vec<[Vector3<f64>; 2]> = Vec::with_capacity(n);
    let mut ps_pred: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut xs_filt: Vec<[Vector3<f64>; 2]> = Vec::with_capacity(n);
    let mut ps_filt: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut fs: Vec<Matrix3<f64>> = Vec::with_capacity(n);

    let p0 = track.positions[first];
    let mut x = [Vector3::new(p0[0], 0.0, 0.0), Vector3::new(p0[1], 0.0, 0.0)];
    let mut p = Matrix3::from_diagonal_element(PRIOR_VAR);
    for k in 0..n {
        let f = if k == 0 {
            Matrix3::identity()
        } else {
            transition(track.timestamps[k] - track.timestamps[k - 1])
        };
        if k > 0 {
            let dt = track.timestamps[k] - track.timestamps[k - 1];
            x = [f * x[0], f * x[1]];
            p = f * p * f.transpose() + process_noise(dt, q);
        }
        fs.push(f);
        xs_pred.push(x);
        ps_pred.push(p);
        if track.valid[k] {
            // scalar measurement of the first state component
            let s = p[(0, 0)] + r;
            let gain = p.column(0) / s;
            for (axis, xa) in x.iter_mut().enumerate() {
                let innov = track.positions[k][axis] - xa[0];
                *xa += gain * innov;
            }
            let upd = gain * p.row(0);
            p -= upd;
            p = 0.5 * (p + p.transpose());
        }
        xs_filt.push(x);
        ps_filt.push(p);
    }

    let mut xs = xs_filt.clone();
    let mut ps = ps_filt.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        let pp = ps_pred[k + 1];
        let Some(pp_inv) = pp.try_inverse() else {
            return Err(Error::Numeric(format!("singular predicted covariance at step {}", k + 1)));
        };
        let c = ps_filt[k] * fs[k + 1].transpose() * pp_inv;
        for axis in 0..2 {
            xs[k][axis] = xs_filt[k][axis] + c * (xs[k + 1][axis] - xs_pred[k + 1][axis]);
        }
        let pk = ps_filt[k] + c * (ps[k + 1] - pp) * c.transpose();
        ps[k] = 0.5 * (pk + pk.transpose());
    }

    Ok(xs
        .iter()
        .zip(&ps)
        .map(|(x, p)| {
            let mut cov = Matrix6::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    cov[(2 * i, 2 * j)] = p[(i, j)];
                    cov[(2 * i + 1, 2 * j + 1)] = p[(i, j)];
                }
            }
            KinematicState {
                position: [x[0][0], x[1][0]],
                velocity: [x[0][1], x[1][1]],
                acceleration: [x[0][2], x[1][2]],
                covariance: cov,
            }
        })
        .collect())
}

/// Per-agent observed-step features, row-major `n_obs x FEATURE_DIM`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFeatures {
    pub agent_id: String,
    pub steps: Vec<[f64; FEATURE_DIM]>,
}

/// Smooth the observed part of every track, writing velocities and
/// accelerations back into the tracks. Agents with fewer than two valid
/// observations are dropped; an unusable anchor is an error.
pub fn smooth_scene(scene: &Scene, config: &KalmanConfig) -> Result<Scene> {
    let mut out = scene.clone();
    let anchor = scene.anchor_id.clone();
    let mut kept = Vec::with_capacity(out.agents.len());
    for mut a in out.agents.drain(..) {
        let obs = a.len().min(scene.n_obs);
        let observed = AgentTrack {
            id: a.id.clone(),
            positions: a.positions[..obs].to_vec(),
            valid: a.valid[..obs].to_vec(),
            timestamps: a.timestamps[..obs].to_vec(),
            velocities: Vec::new(),
            accelerations: Vec::new(),
        };
        match kalman_smooth(&observed, config) {
            Ok(states) => {
                a.velocities = states.iter().map(|s| s.velocity).collect();
                a.accelerations = states.iter().map(|s| s.acceleration).collect();
                // fill gaps in the observed window with smoothed positions
                for (k, s) in states.iter().enumerate() {
                    if !a.valid[k] {
                        a.positions[k] = s.position;
                    }
                }
                kept.push((a, states));
            }
            Err(e) if a.id == anchor => return Err(e),
            Err(e) => log::debug!("dropping agent: {e}"),
        }
    }
    out.agents = kept.into_iter().map(|(a, _)| a).collect();
    Ok(out)
}

/// Assemble `(X, Y, vX, vY, aX, aY, dt, valid)` per observed step from a
/// normalised scene. Positions are the smoothed ones.
pub fn assemble_features(scene: &Scene, config: &KalmanConfig) -> Result<Vec<AgentFeatures>> {
    let mut out = Vec::with_capacity(scene.agents.len());
    for a in &scene.agents {
        let obs = scene.n_obs;
        if a.len() < obs {
            return Err(Error::InvalidScene(format!("track {} shorter than n_obs", a.id)));
        }
        let observed = AgentTrack {
            id: a.id.clone(),
            positions: a.positions[..obs].to_vec(),
            valid: a.valid[..obs].to_vec(),
            timestamps: a.timestamps[..obs].to_vec(),
            velocities: Vec::new(),
            accelerations: Vec::new(),
        };
        let states = kalman_smooth(&observed, config)?;
        let steps = states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let dt = if k == 0 {
                    a.timestamps[1] - a.timestamps[0]
                } else {
                    a.timestamps[k] - a.timestamps[k - 1]
                };
                [
                    s.position[0],
                    s.position[1],
                    s.velocity[0],
                    s.velocity[1],
                    s.acceleration[0],
                    s.acceleration[1],
                    dt,
                    if a.valid[k] { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        out.push(AgentFeatures {
            agent_id: a.id.clone(),
            steps,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Se2Transform;

    fn track(f: impl Fn(f64) -> Point, n: usize, dt: f64) -> AgentTrack {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        AgentTrack::new("t", ts.iter().map(|&t| f(t)).collect(), ts)
    }

    #[test]
    fn constant_velocity_recovered() {
        let t = track(|t| [t, 0.0], 20, 0.1);
        let s = kalman_smooth(&t, &KalmanConfig::default()).unwrap();
        for st in &s[1..19] {
            assert!((st.velocity[0] - 1.0).abs() < 1e-3, "{:?}", st.velocity);
            assert!(st.velocity[1].abs() < 1e-3);
        }
        for (st, p) in s.iter().zip(&t.positions) {
            assert!((st.position[0] - p[0]).abs() < 1e-2);
        }
    }

    #[test]
    fn constant_acceleration_recovered_exactly() {
        let t = track(|t| [1.0 + 2.0 * t + 0.75 * t * t, -3.0 - t + 0.25 * t * t], 30, 0.1);
        let s = kalman_smooth(&t, &KalmanConfig::default()).unwrap();
        for (k, st) in s.iter().enumerate().skip(5).take(20) {
            let tt = k as f64 * 0.1;
            assert!((st.position[0] - t.positions[k][0]).abs() < 1e-6);
            assert!((st.velocity[0] - (2.0 + 1.5 * tt)).abs() < 1e-6);
            assert!((st.velocity[1] - (-1.0 + 0.5 * tt)).abs() < 1e-6);
            assert!((st.acceleration[0] - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_step_is_interpolated() {
        let mut t = track(|t| [2.0 * t, 0.5 * t], 20, 0.1);
        t.valid[10] = false;
        t.positions[10] = [99.0, 99.0];
        let s = kalman_smooth(&t, &KalmanConfig::default()).unwrap();
        assert!((s[10].position[0] - 2.0).abs() < 1e-2);
        assert!((s[10].position[1] - 0.5).abs() < 1e-2);
    }

    #[test]
    fn too_few_observations_flagged() {
        let mut t = track(|t| [t, 0.0], 5, 0.1);
        t.valid = vec![false, false, true, false, false];
        assert!(matches!(
            kalman_smooth(&t, &KalmanConfig::default()),
            Err(Error::UnusableTrack { .. })
        ));
    }

    #[test]
    fn covariance_is_symmetric_psd_diag() {
        let t = track(|t| [t.sin(), t.cos()], 20, 0.1);
        for st in kalman_smooth(&t, &KalmanConfig::default()).unwrap() {
            let c = st.covariance;
            assert!((c - c.transpose()).abs().max() < 1e-9);
            assert!(c.diagonal().iter().all(|d| *d >= 0.0));
        }
    }

    #[test]
    fn smoothing_commutes_with_rigid_transforms() {
        let mut t = track(|t| [3.0 * t + (7.0 * t).sin() * 0.2, 0.4 * t * t], 20, 0.1);
        t.valid[4] = false;
        let tf = Se2Transform {
            rotation: 0.8,
            translation: [5.0, -7.0],
        };
        let mut moved = t.clone();
        for p in &mut moved.positions {
            *p = tf.apply(*p);
        }
        let a = kalman_smooth(&t, &KalmanConfig::default()).unwrap();
        let b = kalman_smooth(&moved, &KalmanConfig::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let p = tf.apply(x.position);
            let v = tf.rotate(x.velocity);
            let acc = tf.rotate(x.acceleration);
            assert!((p[0] - y.position[0]).abs() < 1e-6 && (p[1] - y.position[1]).abs() < 1e-6);
            assert!((v[0] - y.velocity[0]).abs() < 1e-6 && (v[1] - y.velocity[1]).abs() < 1e-6);
            assert!((acc[0] - y.acceleration[0]).abs() < 1e-6);
        }
    }
}
