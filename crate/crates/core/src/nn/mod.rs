//! Differentiable building blocks of the network.

mod agent_lane;
mod attention;
mod gmm;
mod polyline;
mod trc;

pub use agent_lane::{direction_aware_distance, lane_discount_bias, AgentToLane, LaneGeometry};
pub use attention::MultiHeadAttention;
pub use gmm::{
    feedback_var, integrate_positions, integrate_velocity, GaussianMixtureStep, GmmHead, HeadOutput, ModeParams,
    FEEDBACK_PER_MODE,
};
pub use polyline::{polyline_point_features, PolylineEncoder, POLYLINE_POINTS};
pub(crate) use polyline::conv1d;
pub use trc::{Lstm, Trc, TrcState};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Metres to network units for positions.
pub const POS_SCALE: f64 = 0.05;
/// m/s to network units for velocities.
pub const VEL_SCALE: f64 = 0.1;

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}
