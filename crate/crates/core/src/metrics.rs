//! Displacement, miss-rate and drivable-area metrics over multimodal
//! predictions of the anchor agent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, PreparedScene};
use crate::preprocess::KalmanConfig;
use crate::synth::junction_probe;
use crate::scene::{dist, Point, Polyline};

/// A scene is a miss when its minFDE exceeds this many metres.
pub const MISS_THRESHOLD: f64 = 2.0;

fn check_lengths(modes: &[Vec<Point>], gt: &[Point]) -> Result<()> {
    if modes.is_empty() || gt.is_empty() {
        return Err(Error::Empty("no modes or empty ground truth".into()));
    }
    if let Some(m) = modes.iter().find(|m| m.len() != gt.len()) {
        return Err(Error::Shape(format!(
            "mode has {} steps, ground truth {}",
            m.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn fde(mode: &[Point], gt: &[Point]) -> f64 {
    dist(*mode.last().unwrap(), *gt.last().unwrap())
}

/// Index of the mode with the smallest endpoint error (first on ties).
pub fn best_mode(modes: &[Vec<Point>], gt: &[Point]) -> Result<usize> {
    check_lengths(modes, gt)?;
    let mut best = 0;
    for (i, m) in modes.iter().enumerate() {
        if fde(m, gt) < fde(&modes[best], gt) {
            best = i;
        }
    }
    Ok(best)
}

pub fn min_fde(modes: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    let i = best_mode(modes, gt)?;
    Ok(fde(&modes[i], gt))
}

/// Average displacement of the mode with minimum endpoint error.
pub fn min_ade(modes: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    let m = &modes[best_mode(modes, gt)?];
    Ok(m.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

pub fn miss_rate(min_fdes: &[f64], threshold: f64) -> Result<f64> {
    if min_fdes.is_empty() {
        return Err(Error::Empty("miss rate over zero scenes".into()));
    }
    Ok(min_fdes.iter().filter(|&&d| d > threshold).count() as f64 / min_fdes.len() as f64)
}

/// True when every point lies within its corridor width of some polyline.
pub fn on_road(trajectory: &[Point], polylines: &[Polyline]) -> bool {
    trajectory
        .iter()
        .all(|p| polylines.iter().any(|l| l.distance_to(*p) <= l.width))
}

/// Fraction of compliant trajectories; `None` without polylines.
pub fn dac(modes: &[Vec<Point>], polylines: &[Polyline]) -> Option<f64> {
    if polylines.is_empty() || modes.is_empty() {
        return None;
    }
    Some(modes.iter().filter(|m| on_road(m, polylines)).count() as f64 / modes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub dac: Option<f64>,
}

impl SceneMetrics {
    pub fn compute(scene_id: &str, modes: &[Vec<Point>], gt: &[Point], polylines: &[Polyline]) -> Result<Self> {
        let fde = min_fde(modes, gt)?;
        Ok(Self {
            scene_id: scene_id.to_string(),
            min_ade: min_ade(modes, gt)?,
            min_fde: fde,
            miss: fde > MISS_THRESHOLD,
            dac: dac(modes, polylines),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// Pooled over every mode of every scene that has polylines.
    pub dac: Option<f64>,
    pub scene_count: usize,
    pub scenes: Vec<SceneMetrics>,
}

impl MetricReport {
    /// Every scene contributes the same number of modes, so the pooled
    /// DAC is the mean of per-scene fractions.
    pub fn aggregate(scenes: Vec<SceneMetrics>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Empty("no scenes to evaluate".into()));
        }
        let n = scenes.len() as f64;
        let fdes: Vec<f64> = scenes.iter().map(|s| s.min_fde).collect();
        let with_map: Vec<f64> = scenes.iter().filter_map(|s| s.dac).collect();
        let dac = (!with_map.is_empty()).then(|| with_map.iter().sum::<f64>() / with_map.len() as f64);
        Ok(Self {
            min_ade: scenes.iter().map(|s| s.min_ade).sum::<f64>() / n,
            min_fde: fdes.iter().sum::<f64>() / n,
            miss_rate: miss_rate(&fdes, MISS_THRESHOLD)?,
            dac,
            scene_count: scenes.len(),
            scenes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::parse("metric report", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("metric report", e.to_string()))
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let dac = self.dac.map_or("n/a".to_string(), |d| format!("{d:.4}"));
        let _ = writeln!(s, "{:<10}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<10}{:>10.4}", "minADE", self.min_ade);
        let _ = writeln!(s, "{:<10}{:>10.4}", "minFDE", self.min_fde);
        let _ = writeln!(s, "{:<10}{:>10.4}", "MR", self.miss_rate);
        let _ = writeln!(s, "{:<10}{:>10}", "DAC", dac);
        let _ = writeln!(s, "{:<10}{:>10}", "scenes", self.scene_count);
        s
    }
}

/// Anchor-only evaluation of `model` over scenes with a complete anchor
/// future; scenes without one are skipped.
pub fn evaluate(model: &Model, scenes: &[PreparedScene], arch: Architecture, batch_size: usize) -> Result<MetricReport> {
    let usable: Vec<&PreparedScene> = scenes.iter().filter(|s| s.anchor_future().is_some()).collect();
    let mut out = Vec::with_capacity(usable.len());
    for chunk in usable.chunks(batch_size.max(1)) {
        let preds = model.predict_batch(chunk, arch)?;
        for (s, p) in chunk.iter().zip(&preds) {
            let gt = s.anchor_future().expect("filtered");
            let d = p.discrete(s.anchor);
            out.push(SceneMetrics::compute(&s.scene.scene_id, &d.trajectories, &gt, &s.scene.polylines)?);
        }
    }
    MetricReport::aggregate(out)
}

/// Endpoint radius for a branch to count as covered by a mode.
pub const BRANCH_RADIUS: f64 = 2.0;

/// Which of the branch endpoints have at least one mode endpoint within
/// `radius`.
pub fn branch_coverage<const B: usize>(modes: &[Vec<Point>], branch_ends: [Point; B], radius: f64) -> [bool; B] {
    branch_ends.map(|e| modes.iter().filter_map(|m| m.last()).any(|p| dist(*p, e) <= radius))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seed: u64,
    pub covered: [bool; 2],
    /// Distance from the nearest mode endpoint to each branch endpoint.
    pub nearest: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: Vec<ProbeResult>,
    /// Share of probes with both branches covered.
    pub both_covered: f64,
}

/// Stopped-at-junction probes: does the model put a mode on both the left
/// and the right turn?
pub fn junction_probe_report(
    model: &Model,
    arch: Architecture,
    kalman: &KalmanConfig,
    seeds: &[u64],
) -> Result<ProbeReport> {
    let mut probes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let g = junction_probe(seed)?;
        let [left, right] = g.branch_futures.clone().ok_or(Error::InvalidScene("probe without branches".into()))?;
        let prep = PreparedScene::new(&g.scene.observed(), kalman)?;
        let origin = g.scene.anchor()?.positions[g.scene.n_obs - 1];
        let to_local = |f: &[Point]| {
            let e = *f.last().expect("non-empty branch");
            [e[0] - origin[0], e[1] - origin[1]]
        };
        let ends = [to_local(&left), to_local(&right)];
        let pred = model.forward(&prep, arch)?;
        let modes = pred.discrete(prep.anchor).trajectories;
        let nearest = ends.map(|e| modes.iter().map(|m| dist(*m.last().unwrap(), e)).fold(f64::INFINITY, f64::min));
        probes.push(ProbeResult {
            seed,
            covered: branch_coverage(&modes, ends, BRANCH_RADIUS),
            nearest,
        });
    }
    let both = probes.iter().filter(|p| p.covered == [true, true]).count();
    Ok(ProbeReport {
        both_covered: both as f64 / probes.len().max(1) as f64,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Se2Transform;

    fn line(end: Point, n: usize) -> Vec<Point> {
        (1..=n).map(|k| {
            let f = k as f64 / n as f64;
            [end[0] * f, end[1] * f]
        })
        .collect()
    }

    #[test]
    fn fde_examples() {
        let gt = vec![[0.0, 0.0]];
        assert_eq!(min_fde(&[gt.clone()], &gt).unwrap(), 0.0);
        assert_eq!(min_fde(&[vec![[0.0, 0.0]], vec![[3.0, 4.0]]], &gt).unwrap(), 0.0);
        let d = min_fde(&[vec![[1.0, 1.0]], vec![[3.0, 4.0]]], &gt).unwrap();
        assert_eq!(d, 2f64.sqrt());
    }

    #[test]
    fn ade_uses_the_min_fde_mode() {
        let gt = vec![[0.0, 0.0]; 4];
        // A: path 5 m off on average, endpoint 1 m off
        let a = vec![[6.0, 0.0], [6.0, 0.0], [7.0, 0.0], [1.0, 0.0]];
        // B: path 0.1 m off until an endpoint 2 m off
        let b = vec![[0.1, 0.0], [0.1, 0.0], [0.1, 0.0], [2.0, 0.0]];
        assert_eq!(min_ade(&[a.clone(), b], &gt).unwrap(), 5.0);
        assert_eq!(min_ade(&[a], &gt).unwrap(), 5.0);
        assert_eq!(min_ade(&[gt.clone()], &gt).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(min_fde(&[vec![[0.0, 0.0]]], &[[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn miss_rate_examples() {
        assert_eq!(miss_rate(&[0.0, 0.0], 2.0).unwrap(), 0.0);
        assert_eq!(miss_rate(&[10.0, 10.0], 2.0).unwrap(), 1.0);
        assert_eq!(miss_rate(&[1.0, 3.0], 2.0).unwrap(), 0.5);
        assert!(miss_rate(&[], 2.0).is_err());
    }

    #[test]
    fn dac_examples() {
        let lane = Polyline::new(vec![[0.0, 0.0], [50.0, 0.0]], 2.0).unwrap();
        let on = line([30.0, 0.0], 10);
        let off = line([30.0, 100.0], 10).iter().map(|p| [p[0], p[1] + 100.0]).collect::<Vec<_>>();
        assert_eq!(dac(&[on.clone()], &[lane.clone()]), Some(1.0));
        assert_eq!(dac(&[off.clone()], &[lane.clone()]), Some(0.0));
        let modes = vec![on.clone(), on.clone(), on, off.clone(), off.clone(), off];
        assert_eq!(dac(&modes, &[lane]), Some(0.5));
        assert_eq!(dac(&modes, &[]), None);
    }

    #[test]
    fn duplicate_mode_changes_nothing() {
        let gt = line([10.0, 2.0], 30);
        let lane = Polyline::new(vec![[0.0, 0.0], [50.0, 0.0]], 2.0).unwrap();
        let modes = vec![line([9.0, 0.0], 30), line([11.0, 5.0], 30)];
        let mut dup = modes.clone();
        dup.push(modes[0].clone());
        dup.push(modes[1].clone());
        let a = SceneMetrics::compute("x", &modes, &gt, &[lane.clone()]).unwrap();
        let b = SceneMetrics::compute("x", &dup, &gt, &[lane]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_round_trips_and_renders() {
        let s = vec![
            SceneMetrics { scene_id: "a".into(), min_ade: 1.0, min_fde: 1.0, miss: false, dac: Some(1.0) },
            SceneMetrics { scene_id: "b".into(), min_ade: 2.0, min_fde: 3.0, miss: true, dac: None },
        ];
        let r = MetricReport::aggregate(s).unwrap();
        assert_eq!(r.miss_rate, 0.5);
        assert_eq!(r.dac, Some(1.0));
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.table().contains("minFDE"));
    }

    #[test]
    fn metrics_are_rigid_invariant() {
        let gt = line([20.0, 3.0], 30);
        let lanes = vec![
            Polyline::new(vec![[-5.0, 0.0], [40.0, 0.0]], 2.0).unwrap(),
            Polyline::new(vec![[10.0, 0.0], [25.0, 10.0]], 2.0).unwrap(),
        ];
        let modes = vec![line([18.0, 0.5], 30), line([22.0, 9.0], 30), line([5.0, -4.0], 30)];
        let t = Se2Transform { rotation: 1.1, translation: [7.0, -3.0] };
        let tr = |ps: &[Point]| ps.iter().map(|p| t.apply(*p)).collect::<Vec<_>>();
        let lanes_t: Vec<Polyline> = lanes
            .iter()
            .map(|l| Polyline::new(tr(&l.points), l.width).unwrap())
            .collect();
        let modes_t: Vec<Vec<Point>> = modes.iter().map(|m| tr(m)).collect();
        let a = SceneMetrics::compute("x", &modes, &gt, &lanes).unwrap();
        let b = SceneMetrics::compute("x", &modes_t, &tr(&gt), &lanes_t).unwrap();
        assert!((a.min_ade - b.min_ade).abs() < 1e-9);
        assert!((a.min_fde - b.min_fde).abs() < 1e-9);
        assert_eq!(a.miss, b.miss);
        assert_eq!(a.dac, b.dac);
    }

    #[test]
    fn branch_coverage_radius() {
        let modes = vec![vec![[0.0, 0.0], [10.0, 1.9]], vec![[0.0, 0.0], [-10.0, 5.0]]];
        assert_eq!(branch_coverage(&modes, [[10.0, 0.0], [-10.0, 0.0]], 2.0), [true, false]);
        assert_eq!(branch_coverage(&modes, [[10.0, 0.0], [-10.0, 0.0]], 5.0), [true, true]);
    }

    #[test]
    fn probe_report_runs_on_untrained_model() {
        use crate::model::{ModelConfig, Variant};
        let cfg = ModelConfig { d_model: 16, heads: 4, ..ModelConfig::default() };
        let m = Model::new(cfg, 1).unwrap();
        let r = junction_probe_report(&m, Variant::Full.architecture(), &KalmanConfig::default(), &[1, 2]).unwrap();
        assert_eq!(r.probes.len(), 2);
        assert!(r.probes.iter().all(|p| p.nearest.iter().all(|d| d.is_finite())));
    }
}
