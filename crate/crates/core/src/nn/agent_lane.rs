use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::autograd::{AttnGroup, Tape, Var};
use crate::params::ParamStore;
use crate::scene::{Point, Polyline};

/// Geometry the discount needs for one agent: where it is and, when it is
/// moving, which way it is heading (unit vector).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneGeometry {
    pub position: Point,
    pub heading: Option<Point>,
}

/// `d' = distance to the closest centerline point + beta (1 - cos dpsi)`,
/// with `dpsi` the angle between heading and the local lane tangent. The
/// direction term is dropped when the heading is unknown.
pub fn direction_aware_distance(agent: &LaneGeometry, lane: &Polyline, beta: f64) -> f64 {
    let proj = lane.project(agent.position);
    let misalign = match agent.heading {
        Some(h) => 1.0 - (h[0] * proj.tangent[0] + h[1] * proj.tangent[1]),
        None => 0.0,
    };
    proj.distance + beta * misalign
}

/// Additive attention-logit bias `-d'/lambda` for every (agent, lane) pair
/// of every group, in the layout [`Tape::attention`] expects.
///
/// Adding `ln(exp(-d'/lambda))` to the logits is the same as multiplying
/// the softmax weights by the discount and renormalising.
pub fn lane_discount_bias(
    groups: &[AttnGroup],
    agents: &[LaneGeometry],
    lanes: &[Polyline],
    lambda: f64,
    beta: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for g in groups {
        for a in &agents[g.q_start..g.q_start + g.q_len] {
            for l in &lanes[g.k_start..g.k_start + g.k_len] {
                out.push(-direction_aware_distance(a, l, beta) / lambda);
            }
        }
    }
    out
}

/// Single-headed agent-to-lane attention: a key per agent, query and value
/// per lane, discounted by direction-aware distance, added to the agent
/// embedding.
#[derive(Clone, Debug)]
pub struct AgentToLane {
    pub agent_key: Linear,
    pub lane_query: Linear,
    pub lane_value: Linear,
    /// Distance scale of the discount, metres.
    pub lambda: f64,
    /// Weight of heading misalignment, metres.
    pub beta: f64,
}

impl AgentToLane {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize) -> Self {
        Self {
            agent_key: Linear::new(store, rng, &format!("{name}.agent_key"), d_model, d_model, true),
            lane_query: Linear::new(store, rng, &format!("{name}.lane_query"), d_model, d_model, true),
            lane_value: Linear::new(store, rng, &format!("{name}.lane_value"), d_model, d_model, true),
            lambda: 10.0,
            beta: 5.0,
        }
    }

    /// `groups` map agent rows onto lane rows; an agent whose group has no
    /// lanes passes through unchanged. Returns `(output, attention node)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        agents: Var,
        lanes: Var,
        groups: Vec<AttnGroup>,
        bias: Vec<f64>,
    ) -> (Var, Var) {
        let k = self.agent_key.forward(tape, store, agents);
        let q = self.lane_query.forward(tape, store, lanes);
        let v = self.lane_value.forward(tape, store, lanes);
        let attn = tape.attention(k, q, v, groups, 1, Some(bias));
        (tape.add(agents, attn), attn)
    }
}
