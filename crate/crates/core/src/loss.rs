//! Gaussian-mixture likelihood and soft winner-take-all weighting.
//!
//! The scalar functions here are the reference definitions; the batched,
//! differentiable version used in training is [`Tape::mixture_nll`].
//!
//! [`Tape::mixture_nll`]: crate::autograd::Tape::mixture_nll

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::log_sum_exp;
use crate::error::{Error, Result};

/// Smallest variance the output head can emit.
pub const VARIANCE_FLOOR: f64 = 1e-3;

/// Negative log-likelihood of a 4-D target `(X, Y, vX, vY)` under one
/// diagonal Gaussian:
///
/// `0.5 * (z - mu)^T S^-1 (z - mu) + ln(2 pi sqrt(det S))`.
///
/// The constant is `ln(2 pi)`, not `2 ln(2 pi)`; it does not affect any
/// gradient.
pub fn mode_nll(target: &[f64; 4], mean: &[f64; 4], variance: &[f64; 4]) -> Result<f64> {
    if let Some(v) = variance.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numeric(format!("non-positive variance {v}")));
    }
    Ok(mode_nll_unchecked(target, mean, variance))
}

#[inline]
pub(crate) fn mode_nll_unchecked(target: &[f64], mean: &[f64; 4], variance: &[f64; 4]) -> f64 {
    let mut maha = 0.0;
    let mut log_det = 0.0;
    for d in 0..4 {
        let e = target[d] - mean[d];
        maha += e * e / variance[d];
        log_det += variance[d].ln();
    }
    0.5 * maha + (2.0 * PI).ln() + 0.5 * log_det
}

/// One mixture component: mean and diagonal variance over (X, Y, vX, vY).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeGaussian {
    pub mean: [f64; 4],
    pub variance: [f64; 4],
}

/// `-ln sum_i (w_i a_i) exp(-NLL_i)`, evaluated with a log-sum-exp shift.
///
/// The products `w_i a_i` are not renormalised.
pub fn mixture_loss(
    target: &[f64; 4],
    modes: &[ModeGaussian],
    weights: &[f64],
    wta: &[f64],
) -> Result<f64> {
    if modes.is_empty() || modes.len() != weights.len() || modes.len() != wta.len() {
        return Err(Error::Shape(format!(
            "mixture_loss: {} modes, {} weights, {} wta factors",
            modes.len(),
            weights.len(),
            wta.len()
        )));
    }
    let mut terms = Vec::with_capacity(modes.len());
    for ((m, &w), &a) in modes.iter().zip(weights).zip(wta) {
        if w < 0.0 || a < 0.0 {
            return Err(Error::Numeric("negative mixture or WTA weight".into()));
        }
        terms.push(w.ln() + a.ln() - mode_nll(target, &m.mean, &m.variance)?);
    }
    Ok(-log_sum_exp(&terms))
}

/// Soft winner-take-all parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WtaSchedule {
    /// Exponent slope.
    pub m: f64,
    /// Reference displacement in metres.
    pub d_ref: f64,
    /// Annealing scalar; 1 disables the reweighting, 0 is the sharpest.
    pub alpha: f64,
}

impl Default for WtaSchedule {
    fn default() -> Self {
        Self {
            m: 20.0,
            d_ref: 2.0,
            alpha: 1.0,
        }
    }
}

impl WtaSchedule {
    /// Linear annealing: `alpha = 1 - epoch / epochs`.
    pub fn alpha_at(epoch: usize, epochs: usize) -> f64 {
        if epochs == 0 {
            return 1.0;
        }
        (1.0 - epoch as f64 / epochs as f64).clamp(0.0, 1.0)
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self {
            alpha: alpha.clamp(0.0, 1.0),
            ..self
        }
    }

    /// `ln a_i = m (1 - alpha) (d_ref - D_i)`.
    pub fn log_weight(&self, displacement: f64) -> f64 {
        self.m * (1.0 - self.alpha) * (self.d_ref - displacement)
    }

    pub fn weight(&self, displacement: f64) -> f64 {
        self.log_weight(displacement).exp()
    }
}

/// Per-mode WTA factor from the Euclidean distance between each mode's
/// final position and the ground-truth final position.
pub fn wta_weights(mode_endpoints: &[[f64; 2]], gt_endpoint: [f64; 2], schedule: &WtaSchedule) -> Vec<f64> {
    mode_endpoints
        .iter()
        .map(|p| {
            let d = ((p[0] - gt_endpoint[0]).powi(2) + (p[1] - gt_endpoint[1]).powi(2)).sqrt();
            schedule.weight(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_at_mean_with_unit_covariance() {
        let z = [1.0, 2.0, 3.0, 4.0];
        let v = mode_nll(&z, &z, &[1.0; 4]).unwrap();
        assert!((v - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v - 1.8379).abs() < 1e-4);
    }

    #[test]
    fn nll_with_scaled_first_axis() {
        let z = [0.0; 4];
        let v = mode_nll(&z, &z, &[4.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((v - (4.0 * PI).ln()).abs() < 1e-12);
        assert!((v - 2.5310).abs() < 1e-4);
    }

    #[test]
    fn nll_rejects_zero_variance() {
        assert!(mode_nll(&[0.0; 4], &[0.0; 4], &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn single_mode_mixture_is_plain_nll() {
        let m = ModeGaussian {
            mean: [0.5, -0.2, 1.0, 0.0],
            variance: [0.3, 0.4, 1.2, 2.0],
        };
        let z = [0.1, 0.2, 0.3, 0.4];
        let l = mixture_loss(&z, &[m], &[1.0], &[1.0]).unwrap();
        assert!((l - mode_nll(&z, &m.mean, &m.variance).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wta_spot_values() {
        let s = WtaSchedule::default();
        assert_eq!(s.with_alpha(1.0).weight(7.3), 1.0);
        assert_eq!(s.with_alpha(0.0).weight(2.0), 1.0);
        assert!((s.with_alpha(0.0).weight(2.1) - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn linear_alpha_schedule() {
        assert_eq!(WtaSchedule::alpha_at(0, 20), 1.0);
        assert!((WtaSchedule::alpha_at(5, 20) - 0.75).abs() < 1e-12);
        assert_eq!(WtaSchedule::alpha_at(20, 20), 0.0);
    }
}
