use rand_chacha::ChaCha8Rng;

use super::{Linear, POS_SCALE, VEL_SCALE};
use crate::autograd::{Tape, Var};
use crate::loss::VARIANCE_FLOOR;
use crate::params::ParamStore;
use crate::scene::Point;
use crate::tensor::Tensor;

/// Values fed back per mode: mean position (2), position variance (2),
/// mean velocity (2), velocity variance (2) and the mixture weight, once
/// for each of the two mixtures.
pub const FEEDBACK_PER_MODE: usize = 10;

/// Per-step velocity mixture parameters for a batch of agents. Column
/// `2i` / `2i+1` of `mu_v` and `var_v` are the x / y entries of mode `i`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub mu_v: Var,
    pub var_v: Var,
    pub logits: Var,
    pub weights: Var,
}

/// Three fully connected layers mapping a decoder embedding to velocity
/// means, velocity variances and mixture logits of `modes` components.
#[derive(Clone, Debug)]
pub struct GmmHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub modes: usize,
}

impl GmmHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, modes: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_model, d_model, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_model, d_model, true),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), d_model, 5 * modes, true),
            modes,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> HeadOutput {
        let i = self.modes;
        let h = self.fc1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, store, h);
        let h = tape.relu(h);
        let out = self.fc3.forward(tape, store, h);

        let mu = tape.slice_cols(out, 0, 2 * i);
        let mu_v = tape.scale(mu, 1.0 / VEL_SCALE);
        let raw = tape.slice_cols(out, 2 * i, 2 * i);
        let sp = tape.softplus(raw);
        let sp = tape.scale(sp, 1.0 / (VEL_SCALE * VEL_SCALE));
        let var_v = tape.offset(sp, VARIANCE_FLOOR);
        let logits = tape.slice_cols(out, 4 * i, i);
        let weights = tape.softmax_rows(logits);
        HeadOutput {
            mu_v,
            var_v,
            logits,
            weights,
        }
    }
}

/// One integrator step on the tape: `p_t = p_{t-1} + T v_t` and
/// `var_p,t = var_p,t-1 + T^2 var_v,t`. Returns `(mu_p, var_p)`.
pub fn integrate_velocity(
    tape: &mut Tape,
    mu_p: Var,
    var_p: Var,
    mu_v: Var,
    var_v: Var,
    dt: f64,
) -> (Var, Var) {
    let step = tape.scale(mu_v, dt);
    let spread = tape.scale(var_v, dt * dt);
    (tape.add(mu_p, step), tape.add(var_p, spread))
}

/// Roll a start position forward through a velocity sequence.
pub fn integrate_positions(start: Point, velocities: &[Point], dt: f64) -> Vec<Point> {
    let mut p = start;
    velocities
        .iter()
        .map(|v| {
            p = [p[0] + dt * v[0], p[1] + dt * v[1]];
            p
        })
        .collect()
}

/// Scaled feedback vector on the tape, `modes * FEEDBACK_PER_MODE` columns
/// in the per-mode layout of [`GaussianMixtureStep::feedback`].
pub fn feedback_var(tape: &mut Tape, mu_p: Var, var_p: Var, mu_v: Var, var_v: Var, weights: Var) -> Var {
    let modes = tape.shape(weights).1;
    let a = tape.scale(mu_p, POS_SCALE);
    let b = tape.scale(var_p, POS_SCALE * POS_SCALE);
    let c = tape.scale(mu_v, VEL_SCALE);
    let d = tape.scale(var_v, VEL_SCALE * VEL_SCALE);
    let all = tape.concat_cols(&[a, b, c, d, weights]);
    tape.gather_cols(all, &feedback_order(modes))
}

/// Column permutation from `[mu_p | var_p | mu_v | var_v | w]` blocks to
/// the per-mode layout.
fn feedback_order(modes: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(modes * FEEDBACK_PER_MODE);
    for i in 0..modes {
        for block in 0..4 {
            idx.push(block * 2 * modes + 2 * i);
            idx.push(block * 2 * modes + 2 * i + 1);
        }
        idx.push(8 * modes + i);
        idx.push(8 * modes + i);
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeParams {
    pub mu_p: Point,
    pub var_p: Point,
    pub mu_v: Point,
    pub var_v: Point,
    pub weight: f64,
}

/// Mixture over positions and velocities for one agent at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureStep {
    pub modes: Vec<ModeParams>,
}

impl GaussianMixtureStep {
    /// Reads row `row` of batched tape values.
    pub fn from_rows(row: usize, mu_p: &Tensor, var_p: &Tensor, mu_v: &Tensor, var_v: &Tensor, w: &Tensor) -> Self {
        let pt = |t: &Tensor, i: usize| [t.get(row, 2 * i), t.get(row, 2 * i + 1)];
        let modes = (0..w.cols())
            .map(|i| ModeParams {
                mu_p: pt(mu_p, i),
                var_p: pt(var_p, i),
                mu_v: pt(mu_v, i),
                var_v: pt(var_v, i),
                weight: w.get(row, i),
            })
            .collect();
        Self { modes }
    }

    /// Start-of-decoding mixture: every mode at `position`, at rest, with
    /// floor variances and uniform weights.
    pub fn initial(position: Point, modes: usize) -> Self {
        let m = ModeParams {
            mu_p: position,
            var_p: [VARIANCE_FLOOR; 2],
            mu_v: [0.0; 2],
            var_v: [VARIANCE_FLOOR; 2],
            weight: 1.0 / modes as f64,
        };
        Self { modes: vec![m; modes] }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Scaled parameters, [`FEEDBACK_PER_MODE`] per mode.
    pub fn feedback(&self) -> Vec<f64> {
        let (ps, vs) = (POS_SCALE, VEL_SCALE);
        self.modes
            .iter()
            .flat_map(|m| {
                [
                    m.mu_p[0] * ps,
                    m.mu_p[1] * ps,
                    m.var_p[0] * ps * ps,
                    m.var_p[1] * ps * ps,
                    m.mu_v[0] * vs,
                    m.mu_v[1] * vs,
                    m.var_v[0] * vs * vs,
                    m.var_v[1] * vs * vs,
                    m.weight,
                    m.weight,
                ]
            })
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        let wsum: f64 = self.modes.iter().map(|m| m.weight).sum();
        (wsum - 1.0).abs() < 1e-6
            && self.modes.iter().all(|m| {
                m.weight >= 0.0 && m.var_p.iter().chain(&m.var_v).all(|&v| v > 0.0 && v.is_finite())
            })
    }
}
