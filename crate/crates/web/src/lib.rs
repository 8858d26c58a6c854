//! Browser demo. The page generates a synthetic scene, optionally loads a
//! checkpoint written by `dfrnn train`, and draws the forecast of the
//! anchor agent together with its metrics.
//!
//! Everything is exchanged as JSON strings in the scene's local frame
//! (anchor's last observed position at the origin).

use dfrnn::checkpoint::Checkpoint;
use dfrnn::metrics::SceneMetrics;
use dfrnn::model::{Model, ModelConfig, PreparedScene, Variant};
use dfrnn::preprocess::KalmanConfig;
use dfrnn::scene::Point;
use dfrnn::synth::{generate_scene, Scenario};
use dfrnn::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SCENARIOS: [Scenario; 4] = [Scenario::Straight, Scenario::Curve, Scenario::TJunction, Scenario::StoppedJunction];

#[derive(Serialize)]
struct AgentView {
    id: String,
    anchor: bool,
    observed: Vec<Point>,
    future: Vec<Point>,
}

#[derive(Serialize)]
struct SceneView {
    scene_id: String,
    scenario: &'static str,
    lanes: Vec<Vec<Point>>,
    agents: Vec<AgentView>,
}

#[derive(Serialize)]
struct ModeView {
    probability: f64,
    path: Vec<Point>,
}

#[derive(Serialize)]
struct ForecastView {
    variant: &'static str,
    modes: Vec<ModeView>,
    metrics: Option<SceneMetrics>,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("views serialise")
}

/// Demo state; the wasm wrapper below only converts errors.
pub struct Session {
    model: Model,
    kalman: KalmanConfig,
    source: String,
    prepared: Option<PreparedScene>,
    scenario: &'static str,
}

impl Session {
    /// Untrained model at the default size.
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            model: Model::new(ModelConfig::default(), seed)?,
            kalman: KalmanConfig::default(),
            source: format!("untrained (seed {seed})"),
            prepared: None,
            scenario: "",
        })
    }

    pub fn model_source(&self) -> &str {
        &self.source
    }

    pub fn load_checkpoint(&mut self, text: &str) -> Result<String> {
        let ck = Checkpoint::from_json(text, "checkpoint")?;
        self.model = ck.model()?;
        self.kalman = ck.config.kalman.clone();
        self.source = format!("checkpoint, epoch {}", ck.epoch);
        if let Some(p) = &self.prepared {
            self.prepared = Some(PreparedScene::new(&p.scene, &self.kalman)?);
        }
        Ok(self.source.clone())
    }

    pub fn generate(&mut self, scenario: &str, seed: u64) -> Result<String> {
        let kind = SCENARIOS
            .into_iter()
            .find(|s| s.name() == scenario)
            .ok_or_else(|| Error::Config(format!("unknown scenario {scenario:?}")))?;
        let cfg = &self.model.config;
        let mut scene = generate_scene(&kind.spec(seed))?;
        if scene.n_obs != cfg.n_obs || scene.n_pred != cfg.n_pred {
            return Err(Error::Config(format!(
                "model expects {}+{} steps, scene has {}+{}",
                cfg.n_obs, cfg.n_pred, scene.n_obs, scene.n_pred
            )));
        }
        scene.scene_id = format!("{}_{seed}", kind.name());
        let p = PreparedScene::new(&scene, &self.kalman)?;
        let n_obs = p.scene.n_obs;
        let view = SceneView {
            scene_id: scene.scene_id.clone(),
            scenario: kind.name(),
            lanes: p.scene.polylines.iter().map(|l| l.points.clone()).collect(),
            agents: p
                .scene
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| AgentView {
                    id: a.id.clone(),
                    anchor: i == p.anchor,
                    observed: (0..n_obs).filter(|&t| a.valid[t]).map(|t| a.positions[t]).collect(),
                    future: p.future[i].iter().flatten().copied().collect(),
                })
                .collect(),
        };
        self.prepared = Some(p);
        self.scenario = kind.name();
        Ok(json(&view))
    }

    pub fn forecast(&self, variant: &str) -> Result<String> {
        let v: Variant = variant.parse()?;
        let p = self
            .prepared
            .as_ref()
            .ok_or_else(|| Error::Empty("generate a scene first".into()))?;
        let pred = self.model.forward(p, v)?;
        let d = pred.discrete(p.anchor);
        let metrics = match p.anchor_future() {
            Some(gt) => Some(SceneMetrics::compute(&p.scene.scene_id, &d.trajectories, &gt, &p.scene.polylines)?),
            None => None,
        };
        let origin = p.last_position(p.anchor);
        let modes = d
            .trajectories
            .into_iter()
            .zip(d.probabilities)
            .map(|(path, probability)| ModeView {
                probability,
                path: std::iter::once(origin).chain(path).collect(),
            })
            .collect();
        Ok(json(&ForecastView {
            variant: v.name(),
            modes,
            metrics,
        }))
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Session::new(seed.into()).map(Demo).map_err(js)
    }

    /// Scene JSON: lanes, observed and future paths of every agent.
    pub fn generate(&mut self, scenario: &str, seed: u32) -> std::result::Result<String, JsError> {
        self.0.generate(scenario, seed.into()).map_err(js)
    }

    /// Replace the model by a checkpoint's; returns a short description.
    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, text: &str) -> std::result::Result<String, JsError> {
        self.0.load_checkpoint(text).map_err(js)
    }

    /// Forecast JSON for the anchor: modes with probabilities and metrics.
    pub fn forecast(&self, variant: &str) -> std::result::Result<String, JsError> {
        self.0.forecast(variant).map_err(js)
    }

    #[wasm_bindgen(getter, js_name = modelSource)]
    pub fn model_source(&self) -> String {
        self.0.model_source().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_are_rejected() {
        let mut s = Session::new(0).unwrap();
        assert!(s.generate("roundabout", 1).is_err());
        assert!(s.forecast("full").is_err());
        s.generate("curve", 1).unwrap();
        assert!(s.forecast("everything").is_err());
    }

    #[test]
    fn scene_view_marks_one_anchor() {
        let mut s = Session::new(0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.generate("t_junction", 4).unwrap()).unwrap();
        let agents = v["agents"].as_array().unwrap();
        assert_eq!(agents.iter().filter(|a| a["anchor"] == true).count(), 1);
        assert!(!v["lanes"].as_array().unwrap().is_empty());
    }
}
