//! Encoder, interactive decoder and the weight-sharing network variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    feedback_var, integrate_positions, integrate_velocity, lane_discount_bias, polyline_point_features,
    AgentToLane, GaussianMixtureStep, GmmHead, LaneGeometry, Linear, Lstm, MultiHeadAttention, PolylineEncoder,
    Trc, TrcState, FEEDBACK_PER_MODE, POS_SCALE, VEL_SCALE,
};
use crate::params::ParamStore;
use crate::preprocess::{assemble_features, smooth_scene, AgentFeatures, KalmanConfig, FEATURE_DIM};
use crate::scene::{Point, Polyline, Scene, DEFAULT_CROP_RADIUS};
use crate::tensor::Tensor;

/// Below this speed (m/s) an agent has no usable heading for the lane
/// discount.
pub const MIN_HEADING_SPEED: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub modes: usize,
    pub n_obs: usize,
    pub n_pred: usize,
    pub dt: f64,
    pub map_every_n: usize,
    /// Distance scale of the agent-to-lane discount, metres.
    pub lane_lambda: f64,
    /// Heading-misalignment weight of the discount, metres.
    pub lane_beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 8,
            modes: 6,
            n_obs: 20,
            n_pred: 30,
            dt: 0.1,
            map_every_n: 10,
            lane_lambda: 10.0,
            lane_beta: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modes == 0 {
            return bad("modes must be at least 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.n_obs < 2 || self.n_pred == 0 || self.map_every_n == 0 {
            return bad("n_obs >= 2, n_pred >= 1 and map_every_n >= 1 required".into());
        }
        if !(self.dt > 0.0) || !(self.lane_lambda > 0.0) || self.lane_beta < 0.0 {
            return bad("dt and lane_lambda must be positive, lane_beta non-negative".into());
        }
        if ((self.map_every_n as f64) * self.dt - 1.0).abs() > 1e-9 {
            log::warn!(
                "map attention every {} steps of {} s is not once per second",
                self.map_every_n,
                self.dt
            );
        }
        Ok(())
    }
}

/// Where map information enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPlacement {
    None,
    Encoder,
    Decoder,
}

/// Which submodules a forward pass uses. All architectures index the same
/// parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Temporal encoder; without it the initial embedding comes from the
    /// last observed position alone.
    pub encoder: bool,
    /// Inter-agent attention in encoder and decoder.
    pub social: bool,
    pub map: MapPlacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SocialOnly,
    MapOnly,
}

impl Variant {
    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Full => Architecture {
                encoder: true,
                social: true,
                map: MapPlacement::Decoder,
            },
            Variant::SocialOnly => Architecture {
                encoder: true,
                social: true,
                map: MapPlacement::None,
            },
            Variant::MapOnly => Architecture {
                encoder: false,
                social: false,
                map: MapPlacement::Decoder,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SocialOnly => "social_only",
            Variant::MapOnly => "map_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "social_only" => Ok(Variant::SocialOnly),
            "map_only" => Ok(Variant::MapOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl From<Variant> for Architecture {
    fn from(v: Variant) -> Self {
        v.architecture()
    }
}

/// A scene ready for the network: frame normalised at the anchor, lanes
/// cropped, observed tracks smoothed and featurised.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: Scene,
    pub features: Vec<AgentFeatures>,
    pub anchor: usize,
    /// Ground-truth future per agent, `None` where a step is missing.
    pub future: Vec<Vec<Option<Point>>>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, kalman: &KalmanConfig) -> Result<Self> {
        scene.validate()?;
        let s = scene.normalize_frame()?.crop_polylines(DEFAULT_CROP_RADIUS)?;
        let s = smooth_scene(&s, kalman)?;
        let features = assemble_features(&s, kalman)?;
        let anchor = s.anchor_index()?;
        let future = s
            .agents
            .iter()
            .map(|a| {
                (s.n_obs..s.n_obs + s.n_pred)
                    .map(|k| (k < a.len() && a.valid[k]).then(|| a.positions[k]))
                    .collect()
            })
            .collect();
        Ok(Self {
            scene: s,
            features,
            anchor,
            future,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.features.len()
    }

    pub fn last_position(&self, agent: usize) -> Point {
        let s = self.features[agent].steps.last().expect("non-empty observation");
        [s[0], s[1]]
    }

    pub fn last_velocity(&self, agent: usize) -> Point {
        let s = self.features[agent].steps.last().expect("non-empty observation");
        [s[2], s[3]]
    }

    /// Ground-truth future of the anchor; `None` if any step is missing.
    pub fn anchor_future(&self) -> Option<Vec<Point>> {
        self.future[self.anchor].iter().copied().collect()
    }
}

/// Several prepared scenes flattened into shared agent and lane rows.
pub struct Batch<'a> {
    pub scenes: Vec<&'a PreparedScene>,
    /// Start row of each scene's agents, plus the total at the end.
    pub agent_offsets: Vec<usize>,
    pub lane_offsets: Vec<usize>,
    pub lanes: Vec<Polyline>,
    n_obs: usize,
}

impl<'a> Batch<'a> {
    pub fn new(scenes: Vec<&'a PreparedScene>) -> Result<Self> {
        let first = scenes.first().ok_or(Error::Empty("batch has no scenes".into()))?;
        let n_obs = first.scene.n_obs;
        let mut agent_offsets = vec![0];
        let mut lane_offsets = vec![0];
        let mut lanes = Vec::new();
        for s in &scenes {
            if s.n_agents() == 0 {
                return Err(Error::InvalidScene(format!("scene {} has no agents", s.scene.scene_id)));
            }
            if s.scene.n_obs != n_obs {
                return Err(Error::InvalidScene("scenes in a batch must share n_obs".into()));
            }
            agent_offsets.push(agent_offsets.last().unwrap() + s.n_agents());
            lanes.extend(s.scene.polylines.iter().cloned());
            lane_offsets.push(lanes.len());
        }
        Ok(Self {
            scenes,
            agent_offsets,
            lane_offsets,
            lanes,
            n_obs,
        })
    }

    pub fn n_agents(&self) -> usize {
        *self.agent_offsets.last().unwrap()
    }

    pub fn agent_groups(&self) -> Vec<AttnGroup> {
        self.agent_offsets
            .windows(2)
            .map(|w| AttnGroup::square(w[0], w[1] - w[0]))
            .collect()
    }

    pub fn lane_groups(&self) -> Vec<AttnGroup> {
        self.lane_offsets
            .windows(2)
            .map(|w| AttnGroup::square(w[0], w[1] - w[0]))
            .collect()
    }

    pub fn agent_lane_groups(&self) -> Vec<AttnGroup> {
        (0..self.scenes.len())
            .map(|i| AttnGroup {
                q_start: self.agent_offsets[i],
                q_len: self.agent_offsets[i + 1] - self.agent_offsets[i],
                k_start: self.lane_offsets[i],
                k_len: self.lane_offsets[i + 1] - self.lane_offsets[i],
            })
            .collect()
    }

    /// `(scene, agent)` for every batch row.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.n_agents()).map(move |a| (i, a)))
    }

    fn encoder_input(&self) -> Tensor {
        let n = self.n_agents();
        let mut data = Vec::with_capacity(n * self.n_obs * FEATURE_DIM);
        for (s, a) in self.rows() {
            for f in &self.scenes[s].features[a].steps {
                data.extend_from_slice(&[
                    f[0] * POS_SCALE,
                    f[1] * POS_SCALE,
                    f[2] * VEL_SCALE,
                    f[3] * VEL_SCALE,
                    f[4] * VEL_SCALE,
                    f[5] * VEL_SCALE,
                    f[6] * 10.0,
                    f[7],
                ]);
            }
        }
        Tensor::from_vec(n * self.n_obs, FEATURE_DIM, data)
    }

    fn last_positions(&self) -> Vec<Point> {
        self.rows().map(|(s, a)| self.scenes[s].last_position(a)).collect()
    }

    fn last_geometry(&self) -> Vec<LaneGeometry> {
        self.rows()
            .map(|(s, a)| geometry(self.scenes[s].last_position(a), self.scenes[s].last_velocity(a)))
            .collect()
    }
}

fn geometry(position: Point, velocity: Point) -> LaneGeometry {
    let speed = velocity[0].hypot(velocity[1]);
    LaneGeometry {
        position,
        heading: (speed >= MIN_HEADING_SPEED).then(|| [velocity[0] / speed, velocity[1] / speed]),
    }
}

/// Per-step tape nodes of the decoder, batched over agents.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub mu_p: Var,
    pub var_p: Var,
    pub mu_v: Var,
    pub var_v: Var,
    pub logits: Var,
    pub weights: Var,
    /// Cell state after this step.
    pub cell: Var,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub steps: Vec<StepVars>,
    pub agent_to_lane_calls: usize,
    /// Decoder steps at which the map was attended.
    pub map_steps: Vec<usize>,
}

/// All network parameters and the modules that index them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc_conv1: Linear,
    enc_conv2: Linear,
    enc_lstm: Lstm,
    enc_social: MultiHeadAttention,
    polyline: PolylineEncoder,
    lane_to_lane: MultiHeadAttention,
    agent_to_lane: AgentToLane,
    init_position: Linear,
    trc: Trc,
    dec_social: MultiHeadAttention,
    head: GmmHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let s = &mut store;
        let r = &mut rng;
        let enc_conv1 = Linear::new(s, r, "encoder.conv1", 3 * FEATURE_DIM, d, true);
        let enc_conv2 = Linear::new(s, r, "encoder.conv2", 3 * d, d, true);
        let enc_lstm = Lstm::new(s, r, "encoder.lstm", d, d);
        let enc_social = MultiHeadAttention::new(s, r, "encoder.social", d, config.heads)?;
        let polyline = PolylineEncoder::new(s, r, "map.polyline", d);
        let lane_to_lane = MultiHeadAttention::new(s, r, "map.lane_to_lane", d, config.heads)?;
        let mut agent_to_lane = AgentToLane::new(s, r, "map.agent_to_lane", d);
        agent_to_lane.lambda = config.lane_lambda;
        agent_to_lane.beta = config.lane_beta;
        let init_position = Linear::new(s, r, "decoder.init_position", 2, d, true);
        let trc = Trc::new(s, r, "decoder.trc", d, config.modes * FEEDBACK_PER_MODE);
        let dec_social = MultiHeadAttention::new(s, r, "decoder.social", d, config.heads)?;
        let head = GmmHead::new(s, r, "decoder.head", d, config.modes);
        Ok(Self {
            config,
            params: store,
            enc_conv1,
            enc_conv2,
            enc_lstm,
            enc_social,
            polyline,
            lane_to_lane,
            agent_to_lane,
            init_position,
            trc,
            dec_social,
            head,
        })
    }

    /// Rebuild with the given parameters; names and shapes must match a
    /// freshly built model with `config`.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                m.params.len(),
                params.len()
            )));
        }
        for ((_, name, want), (_, got_name, got)) in m.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {got_name} {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    /// Temporal encoder: two convolutions over time, an LSTM, and (when
    /// `social`) one attention pass across the agents of each scene.
    pub fn encode_agents(&self, tape: &mut Tape, batch: &Batch, social: bool) -> Var {
        let store = &self.params;
        let n = batch.n_agents();
        let n_obs = batch.n_obs;
        let x = tape.input(batch.encoder_input());
        let x = crate::nn::conv1d(tape, store, &self.enc_conv1, x, n_obs);
        let x = crate::nn::conv1d(tape, store, &self.enc_conv2, x, n_obs);
        let d = self.config.d_model;
        let mut h = tape.input(Tensor::zeros(n, d));
        let mut c = tape.input(Tensor::zeros(n, d));
        for t in 0..n_obs {
            let idx: Vec<usize> = (0..n).map(|a| a * n_obs + t).collect();
            let xt = tape.gather_rows(x, &idx);
            (h, c) = self.enc_lstm.step(tape, store, xt, h, c);
        }
        if social {
            self.enc_social.forward(tape, store, h, batch.agent_groups()).0
        } else {
            h
        }
    }

    /// Polyline encoder followed by lane-to-lane attention.
    pub fn encode_lanes(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let pts = tape.input(polyline_point_features(&batch.lanes));
        let lanes = self.polyline.forward(tape, &self.params, pts);
        self.lane_to_lane.forward(tape, &self.params, lanes, batch.lane_groups()).0
    }

    fn attend_map(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        agents: Var,
        lanes: Var,
        geo: &[LaneGeometry],
    ) -> Var {
        let groups = batch.agent_lane_groups();
        let a2l = &self.agent_to_lane;
        let bias = lane_discount_bias(&groups, geo, &batch.lanes, a2l.lambda, a2l.beta);
        a2l.forward(tape, &self.params, agents, lanes, groups, bias).0
    }

    /// Run encoder and `steps` decoder steps on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        arch: Architecture,
        steps: usize,
    ) -> Result<ForwardTrace> {
        let store = &self.params;
        let cfg = &self.config;
        let n = batch.n_agents();
        let (d, modes) = (cfg.d_model, cfg.modes);
        let has_lanes = !batch.lanes.is_empty();
        let mut trace = ForwardTrace::default();

        let lanes = (arch.map != MapPlacement::None && has_lanes).then(|| self.encode_lanes(tape, batch));
        let last = batch.last_positions();

        let mut h = if arch.encoder {
            self.encode_agents(tape, batch, arch.social)
        } else {
            let p: Vec<f64> = last.iter().flat_map(|p| [p[0] * POS_SCALE, p[1] * POS_SCALE]).collect();
            let p = tape.input(Tensor::from_vec(n, 2, p));
            self.init_position.forward(tape, store, p)
        };
        if let (MapPlacement::Encoder, Some(l)) = (arch.map, lanes) {
            h = self.attend_map(tape, batch, h, l, &batch.last_geometry());
            trace.agent_to_lane_calls += 1;
        }

        let mut state = TrcState { h, c: h };
        let zeros = tape.input(Tensor::zeros(n, d));
        let mut social_in = zeros;
        let init: Vec<GaussianMixtureStep> = last.iter().map(|p| GaussianMixtureStep::initial(*p, modes)).collect();
        let block = |f: &dyn Fn(&GaussianMixtureStep, usize) -> f64, cols: usize| -> Tensor {
            let data = init.iter().flat_map(|s| (0..cols).map(move |c| f(s, c))).collect();
            Tensor::from_vec(n, cols, data)
        };
        let mut mu_p = tape.input(block(&|s, c| s.modes[c / 2].mu_p[c % 2], 2 * modes));
        let mut var_p = tape.input(block(&|s, c| s.modes[c / 2].var_p[c % 2], 2 * modes));
        let mut feedback = tape.input(block(&|s, c| s.feedback()[c], modes * FEEDBACK_PER_MODE));
        let mut geo = batch.last_geometry();

        for t in 0..steps {
            if let (MapPlacement::Decoder, Some(l)) = (arch.map, lanes) {
                if t % cfg.map_every_n == 0 {
                    state.h = self.attend_map(tape, batch, state.h, l, &geo);
                    trace.agent_to_lane_calls += 1;
                    trace.map_steps.push(t);
                }
            }
            state = self.trc.step(tape, store, state, social_in, feedback)?;
            let head_in = if arch.social {
                let out = self.dec_social.forward(tape, store, state.h, batch.agent_groups()).0;
                social_in = out;
                out
            } else {
                state.h
            };
            let out = self.head.forward(tape, store, head_in);
            (mu_p, var_p) = integrate_velocity(tape, mu_p, var_p, out.mu_v, out.var_v, cfg.dt);
            feedback = feedback_var(tape, mu_p, var_p, out.mu_v, out.var_v, out.weights);
            trace.steps.push(StepVars {
                mu_p,
                var_p,
                mu_v: out.mu_v,
                var_v: out.var_v,
                logits: out.logits,
                weights: out.weights,
                cell: state.c,
            });
            if arch.map == MapPlacement::Decoder && (t + 1) % cfg.map_every_n == 0 {
                geo = mean_geometry(tape.value(mu_p), tape.value(out.mu_v), tape.value(out.weights));
            }
        }
        Ok(trace)
    }

    /// Batched inference; one prediction set per scene.
    pub fn predict_batch(&self, scenes: &[&PreparedScene], arch: Architecture) -> Result<Vec<PredictionSet>> {
        let batch = Batch::new(scenes.to_vec())?;
        let mut tape = Tape::new();
        let trace = self.forward_tape(&mut tape, &batch, arch, self.config.n_pred)?;
        Ok(collect_predictions(&tape, &batch, &trace, self.config.dt))
    }

    pub fn forward(&self, scene: &PreparedScene, arch: impl Into<Architecture>) -> Result<PredictionSet> {
        Ok(self.predict_batch(&[scene], arch.into())?.remove(0))
    }
}

/// Mixture-weighted mean position and velocity per row.
fn mean_geometry(mu_p: &Tensor, mu_v: &Tensor, w: &Tensor) -> Vec<LaneGeometry> {
    (0..w.rows())
        .map(|r| {
            let (mut p, mut v) = ([0.0; 2], [0.0; 2]);
            for i in 0..w.cols() {
                let wi = w.get(r, i);
                for k in 0..2 {
                    p[k] += wi * mu_p.get(r, 2 * i + k);
                    v[k] += wi * mu_v.get(r, 2 * i + k);
                }
            }
            geometry(p, v)
        })
        .collect()
}

pub fn collect_predictions(tape: &Tape, batch: &Batch, trace: &ForwardTrace, dt: f64) -> Vec<PredictionSet> {
    let mut out: Vec<PredictionSet> = batch
        .scenes
        .iter()
        .map(|s| PredictionSet {
            scene_id: s.scene.scene_id.clone(),
            agent_ids: s.features.iter().map(|f| f.agent_id.clone()).collect(),
            origins: (0..s.n_agents()).map(|a| s.last_position(a)).collect(),
            steps: vec![Vec::with_capacity(trace.steps.len()); s.n_agents()],
            dt,
        })
        .collect();
    for sv in &trace.steps {
        let (mp, vp, mv, vv, w) = (
            tape.value(sv.mu_p),
            tape.value(sv.var_p),
            tape.value(sv.mu_v),
            tape.value(sv.var_v),
            tape.value(sv.weights),
        );
        for (row, (s, a)) in batch.rows().enumerate() {
            out[s].steps[a].push(GaussianMixtureStep::from_rows(row, mp, vp, mv, vv, w));
        }
    }
    out
}

/// Per-agent mixture sequences of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scene_id: String,
    pub agent_ids: Vec<String>,
    /// Last observed (smoothed) position per agent.
    pub origins: Vec<Point>,
    /// `[agent][step]`.
    pub steps: Vec<Vec<GaussianMixtureStep>>,
    pub dt: f64,
}

/// Deterministic realisation of an agent's mixture sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePrediction {
    /// `[mode][step]` mean positions.
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
}

impl PredictionSet {
    pub fn discrete(&self, agent: usize) -> DiscretePrediction {
        predict_discrete(&self.steps[agent])
    }

    /// Re-integrate each mode's mean velocities from the origin.
    pub fn rollout(&self, agent: usize, mode: usize) -> Vec<Point> {
        let v: Vec<Point> = self.steps[agent].iter().map(|s| s.modes[mode].mu_v).collect();
        integrate_positions(self.origins[agent], &v, self.dt)
    }
}

/// Mode means as trajectories; probability is the time-averaged weight,
/// renormalised.
pub fn predict_discrete(steps: &[GaussianMixtureStep]) -> DiscretePrediction {
    let modes = steps.first().map_or(0, |s| s.modes.len());
    let trajectories = (0..modes)
        .map(|i| steps.iter().map(|s| s.modes[i].mu_p).collect())
        .collect();
    let mut probabilities: Vec<f64> = (0..modes)
        .map(|i| steps.iter().map(|s| s.modes[i].weight).sum::<f64>() / steps.len() as f64)
        .collect();
    let z: f64 = probabilities.iter().sum();
    if z > 0.0 {
        probabilities.iter_mut().for_each(|p| *p /= z);
    }
    DiscretePrediction {
        trajectories,
        probabilities,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentTrack;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 4,
            modes: 3,
            n_obs: 20,
            n_pred: 30,
            ..ModelConfig::default()
        }
    }

    fn track(id: &str, start: Point, vel: Point, n: usize) -> AgentTrack {
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let pos = ts.iter().map(|t| [start[0] + vel[0] * t, start[1] + vel[1] * t]).collect();
        AgentTrack::new(id, pos, ts)
    }

    pub(crate) fn scene(extra: &[(Point, Point)]) -> Scene {
        let mut agents = vec![track("anchor", [0.0, 0.0], [8.0, 0.0], 50)];
        for (i, (p, v)) in extra.iter().enumerate() {
            agents.push(track(&format!("a{i}"), *p, *v, 50));
        }
        Scene {
            scene_id: "s".into(),
            dt: 0.1,
            n_obs: 20,
            n_pred: 30,
            anchor_id: "anchor".into(),
            agents,
            polylines: vec![
                Polyline::new(vec![[-20.0, 0.0], [60.0, 0.0]], 2.0).unwrap(),
                Polyline::new(vec![[20.0, -30.0], [20.0, 30.0]], 2.0).unwrap(),
            ],
            frame: Default::default(),
        }
    }

    fn prepared(extra: &[(Point, Point)]) -> PreparedScene {
        PreparedScene::new(&scene(extra), &KalmanConfig::default()).unwrap()
    }

    #[test]
    fn output_shape_and_validity() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let p = prepared(&[([5.0, 3.5], [6.0, 0.0])]);
        let pred = m.forward(&p, Variant::Full).unwrap();
        assert_eq!(pred.steps.len(), 2);
        let d = pred.discrete(p.anchor);
        assert_eq!(d.trajectories.len(), 6);
        assert!(d.trajectories.iter().all(|t| t.len() == 30));
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(pred.steps.iter().flatten().all(|s| s.is_valid()));
    }

    #[test]
    fn trajectories_are_velocity_rollouts() {
        let m = Model::new(small_config(), 1).unwrap();
        let p = prepared(&[([5.0, 3.5], [6.0, 0.0])]);
        let pred = m.forward(&p, Variant::Full).unwrap();
        for a in 0..2 {
            let d = pred.discrete(a);
            for (i, traj) in d.trajectories.iter().enumerate() {
                for (x, y) in traj.iter().zip(pred.rollout(a, i)) {
                    assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn map_attention_call_counts() {
        let m = Model::new(small_config(), 2).unwrap();
        let p = prepared(&[]);
        let batch = Batch::new(vec![&p]).unwrap();
        let calls = |v: Variant| {
            let mut tape = Tape::new();
            m.forward_tape(&mut tape, &batch, v.architecture(), 30).unwrap()
        };
        assert_eq!(calls(Variant::SocialOnly).agent_to_lane_calls, 0);
        let full = calls(Variant::Full);
        assert_eq!(full.agent_to_lane_calls, 3);
        assert_eq!(full.map_steps, vec![0, 10, 20]);
    }

    #[test]
    fn single_mode_has_probability_one() {
        let cfg = ModelConfig { modes: 1, ..small_config() };
        let m = Model::new(cfg, 3).unwrap();
        let pred = m.forward(&prepared(&[]), Variant::Full).unwrap();
        let d = pred.discrete(0);
        assert_eq!(d.trajectories.len(), 1);
        assert!((d.probabilities[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_rollout_is_a_prefix() {
        let m = Model::new(small_config(), 4).unwrap();
        let p = prepared(&[([-8.0, 3.5], [7.0, 0.0])]);
        let batch = Batch::new(vec![&p]).unwrap();
        let run = |k: usize| {
            let mut tape = Tape::new();
            let trace = m.forward_tape(&mut tape, &batch, Variant::Full.architecture(), k).unwrap();
            collect_predictions(&tape, &batch, &trace, 0.1)
        };
        let full = run(30);
        let part = run(12);
        for a in 0..2 {
            assert_eq!(&full[0].steps[a][..12], &part[0].steps[a][..]);
        }
    }

    #[test]
    fn every_variant_depends_on_a_shared_trc_weight() {
        let m = Model::new(small_config(), 5).unwrap();
        let p = prepared(&[([5.0, 3.5], [6.0, 0.0])]);
        let mut bumped = m.clone();
        let id = bumped.params.id_of("decoder.trc.hidden").unwrap();
        bumped.params.get_mut(id).data_mut()[7] += 0.5;
        for v in [Variant::Full, Variant::SocialOnly, Variant::MapOnly] {
            assert_ne!(m.forward(&p, v).unwrap(), bumped.forward(&p, v).unwrap(), "{v:?}");
        }
    }

    #[test]
    fn zeroed_map_attention_matches_social_only() {
        let mut m = Model::new(small_config(), 6).unwrap();
        m.params.zero_prefix("map.agent_to_lane");
        let p = prepared(&[([5.0, 3.5], [6.0, 0.0])]);
        let a = m.forward(&p, Variant::Full).unwrap();
        let b = m.forward(&p, Variant::SocialOnly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn map_only_ignores_distant_agents() {
        let m = Model::new(small_config(), 7).unwrap();
        let alone = m.forward(&prepared(&[]), Variant::MapOnly).unwrap();
        let crowded = m.forward(&prepared(&[([300.0, 300.0], [0.0, 5.0])]), Variant::MapOnly).unwrap();
        assert_eq!(alone.steps[0], crowded.steps[0]);
    }

    #[test]
    fn permuting_agents_permutes_predictions() {
        let m = Model::new(small_config(), 8).unwrap();
        let extra = [([5.0, 3.5], [6.0, 0.0]), ([-10.0, -3.5], [9.0, 0.0])];
        let s = scene(&extra);
        let mut swapped = s.clone();
        swapped.agents.swap(1, 2);
        let k = KalmanConfig::default();
        let a = m.forward(&PreparedScene::new(&s, &k).unwrap(), Variant::Full).unwrap();
        let b = m.forward(&PreparedScene::new(&swapped, &k).unwrap(), Variant::Full).unwrap();
        for (x, y) in [(0, 0), (1, 2), (2, 1)] {
            for (sa, sb) in a.steps[x].iter().zip(&b.steps[y]) {
                for (ma, mb) in sa.modes.iter().zip(&sb.modes) {
                    assert!((ma.mu_p[0] - mb.mu_p[0]).abs() < 1e-9);
                    assert!((ma.weight - mb.weight).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encoder_handles_single_stationary_agent() {
        let m = Model::new(small_config(), 9).unwrap();
        let mut s = scene(&[]);
        s.agents[0] = track("anchor", [3.0, 1.0], [0.0, 0.0], 50);
        let p = PreparedScene::new(&s, &KalmanConfig::default()).unwrap();
        let batch = Batch::new(vec![&p]).unwrap();
        let mut tape = Tape::new();
        let e = m.encode_agents(&mut tape, &batch, true);
        assert_eq!(tape.shape(e), (1, 16));
        assert!(tape.value(e).all_finite());
    }

    #[test]
    fn batching_matches_single_scene_inference() {
        let m = Model::new(small_config(), 10).unwrap();
        let p1 = prepared(&[([5.0, 3.5], [6.0, 0.0])]);
        let mut s2 = scene(&[]);
        s2.polylines.pop();
        let p2 = PreparedScene::new(&s2, &KalmanConfig::default()).unwrap();
        let both = m.predict_batch(&[&p1, &p2], Variant::Full.architecture()).unwrap();
        let one = m.forward(&p2, Variant::Full).unwrap();
        for (a, b) in both[1].steps[0].iter().zip(&one.steps[0]) {
            for (ma, mb) in a.modes.iter().zip(&b.modes) {
                assert!((ma.mu_p[0] - mb.mu_p[0]).abs() < 1e-9 && (ma.var_v[1] - mb.var_v[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rebuild_from_params_checks_shapes() {
        let m = Model::new(small_config(), 11).unwrap();
        assert!(Model::with_params(small_config(), m.params.clone()).is_ok());
        assert!(Model::with_params(ModelConfig::default(), m.params.clone()).is_err());
    }
}
