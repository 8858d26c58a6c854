//! Mixture-likelihood training: per-variant losses, the joint objective over
//! the three weight-sharing variants, and the epoch loop.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{MixtureTargets, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::io::load_dir;
use crate::loss::{mixture_loss, ModeGaussian, WtaSchedule};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Architecture, Batch, Model, PreparedScene, Variant};
use crate::params::{Adam, Gradients, ParamStore};
use crate::preprocess::KalmanConfig;
use crate::scene::{sample_se2_with, Scene};
use crate::tensor::Tensor;

/// Supervision for one agent: `(X, Y, vX, vY)` per future step. The
/// velocity is the finite difference to the previous position, starting
/// from the last observation.
pub fn agent_targets(scene: &PreparedScene, agent: usize, steps: usize, dt: f64) -> Vec<Option<[f64; 4]>> {
    let track = &scene.scene.agents[agent];
    let mut prev = Some(track.positions[scene.scene.n_obs - 1]);
    (0..steps)
        .map(|t| {
            let cur = scene.future[agent].get(t).copied().flatten();
            let out = match (prev, cur) {
                (Some(a), Some(b)) => Some([b[0], b[1], (b[0] - a[0]) / dt, (b[1] - a[1]) / dt]),
                _ => None,
            };
            prev = cur;
            out
        })
        .collect()
}

/// Mean mixture loss over every supervised (agent, step) of `batch` for one
/// variant, plus the same mean without the WTA factors (the value that is
/// logged). `None` when nothing in the batch has a target.
pub fn variant_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    arch: Architecture,
    wta: &WtaSchedule,
) -> Result<Option<(Var, f64)>> {
    let steps = model.config.n_pred;
    let dt = model.config.dt;
    let modes = model.config.modes;
    let targets: Vec<Vec<Option<[f64; 4]>>> = batch
        .rows()
        .map(|(s, a)| agent_targets(batch.scenes[s], a, steps, dt))
        .collect();
    let count = targets.iter().flatten().filter(|t| t.is_some()).count();
    if count == 0 {
        return Ok(None);
    }
    let trace = model.forward_tape(tape, batch, arch, steps)?;
    let n = targets.len();

    let last_mu = tape.value(trace.steps[steps - 1].mu_p);
    let mut log_wta = Tensor::zeros(n, modes);
    for (r, row) in targets.iter().enumerate() {
        if let Some(end) = row[steps - 1] {
            for i in 0..modes {
                let d = (last_mu.get(r, 2 * i) - end[0]).hypot(last_mu.get(r, 2 * i + 1) - end[1]);
                log_wta.set(r, i, wta.log_weight(d));
            }
        }
    }

    let w = 1.0 / count as f64;
    let mut plain = 0.0;
    let mut total: Option<Var> = None;
    for (t, sv) in trace.steps.iter().enumerate() {
        let mut z = Tensor::zeros(n, 4);
        let mut rho = vec![0.0; n];
        for (r, row) in targets.iter().enumerate() {
            if let Some(v) = row[t] {
                z.row_mut(r).copy_from_slice(&v);
                rho[r] = w;
            }
        }
        if rho.iter().all(|x| *x == 0.0) {
            continue;
        }
        let inputs = MixtureTargets {
            targets: z,
            log_wta: log_wta.clone(),
            row_weights: rho,
        };
        if wta.alpha < 1.0 {
            plain += plain_nll(tape, sv, &inputs)?;
        }
        let l = tape.mixture_nll(sv.mu_p, sv.var_p, sv.mu_v, sv.var_v, sv.logits, inputs);
        total = Some(match total {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    Ok(total.map(|v| {
        let p = if wta.alpha < 1.0 { plain } else { tape.value(v).get(0, 0) };
        (v, p)
    }))
}

fn plain_nll(tape: &Tape, sv: &crate::model::StepVars, inputs: &MixtureTargets) -> Result<f64> {
    let (mp, vp, mv, vv, w) = (
        tape.value(sv.mu_p),
        tape.value(sv.var_p),
        tape.value(sv.mu_v),
        tape.value(sv.var_v),
        tape.value(sv.weights),
    );
    let modes = w.cols();
    let ones = vec![1.0; modes];
    let mut sum = 0.0;
    for (r, rho) in inputs.row_weights.iter().enumerate().filter(|(_, x)| **x != 0.0) {
        let z = inputs.targets.row(r);
        let gs: Vec<ModeGaussian> = (0..modes)
            .map(|i| ModeGaussian {
                mean: [mp.get(r, 2 * i), mp.get(r, 2 * i + 1), mv.get(r, 2 * i), mv.get(r, 2 * i + 1)],
                variance: [vp.get(r, 2 * i), vp.get(r, 2 * i + 1), vv.get(r, 2 * i), vv.get(r, 2 * i + 1)],
            })
            .collect();
        sum += rho * mixture_loss(&[z[0], z[1], z[2], z[3]], &gs, w.row(r), &ones)?;
    }
    Ok(sum)
}

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub full: f64,
    pub social: f64,
    pub map: f64,
}

impl LossWeights {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            full: c.lambda_full,
            social: c.lambda_social,
            map: c.lambda_map,
        }
    }
}

/// Per-variant loss values of one batch without WTA factors; `total` is the
/// optimised objective. `full` holds the loss of the trained architecture
/// when it is not one of the sub-networks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub full: Option<f64>,
    pub social: Option<f64>,
    pub map: Option<f64>,
    pub total: f64,
}

/// Objective of one batch. With `explicit` and the full architecture this
/// is `λf·L_full + λs·L_social + λm·L_map` on a single tape, so shared
/// parameters receive the sum of all three gradients; terms with a zero
/// weight are not evaluated. Otherwise only `arch` is trained.
pub fn explicit_training_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    arch: Architecture,
    explicit: bool,
    weights: LossWeights,
    wta: &WtaSchedule,
) -> Result<Option<(Var, LossTerms)>> {
    let mut terms = LossTerms::default();
    let full_arch = Variant::Full.architecture();
    let mut jobs: Vec<(Architecture, f64, Variant)> = Vec::new();
    if explicit && arch == full_arch {
        jobs.push((arch, weights.full, Variant::Full));
        if weights.social > 0.0 {
            jobs.push((Variant::SocialOnly.architecture(), weights.social, Variant::SocialOnly));
        }
        if weights.map > 0.0 {
            jobs.push((Variant::MapOnly.architecture(), weights.map, Variant::MapOnly));
        }
    } else {
        let slot = [Variant::SocialOnly, Variant::MapOnly]
            .into_iter()
            .find(|v| v.architecture() == arch)
            .unwrap_or(Variant::Full);
        jobs.push((arch, 1.0, slot));
    }
    let mut total: Option<Var> = None;
    for (a, lambda, slot) in jobs {
        let Some((l, value)) = variant_loss(model, tape, batch, a, wta)? else {
            return Ok(None);
        };
        match slot {
            Variant::Full => terms.full = Some(value),
            Variant::SocialOnly => terms.social = Some(value),
            Variant::MapOnly => terms.map = Some(value),
        }
        let scaled = tape.scale(l, lambda);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    let total = total.expect("at least one term");
    terms.total = tape.value(total).get(0, 0);
    Ok(Some((total, terms)))
}

/// Loss and parameter gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    scenes: &[&PreparedScene],
    arch: Architecture,
    explicit: bool,
    weights: LossWeights,
    wta: &WtaSchedule,
) -> Result<Option<(LossTerms, Gradients)>> {
    let batch = Batch::new(scenes.to_vec())?;
    let mut tape = Tape::new();
    let Some((root, terms)) = explicit_training_loss(model, &mut tape, &batch, arch, explicit, weights, wta)? else {
        return Ok(None);
    };
    if !terms.total.is_finite() {
        return Ok(Some((terms, Gradients::new())));
    }
    Ok(Some((terms, tape.backward(root).param_grads())))
}

/// Training and validation scenes.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    /// `dir/train` and `dir/val` if present, otherwise every scene in `dir`
    /// is used for training.
    pub fn load(dir: &Path) -> Result<Self> {
        let (t, v) = (dir.join("train"), dir.join("val"));
        if t.is_dir() {
            let val = if v.is_dir() { load_dir(&v)? } else { Vec::new() };
            return Ok(Self { train: load_dir(&t)?, val });
        }
        Ok(Self {
            train: load_dir(dir)?,
            val: Vec::new(),
        })
    }
}

/// Prepare every scene, dropping those that cannot be used.
pub fn prepare_all(scenes: &[Scene], kalman: &KalmanConfig) -> Vec<PreparedScene> {
    scenes
        .iter()
        .filter_map(|s| match PreparedScene::new(s, kalman) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("dropping scene {}: {e}", s.scene_id);
                None
            }
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_full: Option<f64>,
    pub loss_social: Option<f64>,
    pub loss_map: Option<f64>,
    #[serde(rename = "val_minADE")]
    pub val_min_ade: Option<f64>,
    #[serde(rename = "val_minFDE")]
    pub val_min_fde: Option<f64>,
    #[serde(rename = "val_MR")]
    pub val_miss_rate: Option<f64>,
    #[serde(rename = "val_DAC")]
    pub val_dac: Option<f64>,
    pub alpha: f64,
    #[serde(skip)]
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Best,
    Last,
    /// Written when training aborts on a non-finite loss.
    LastGood,
}

/// Receives the per-epoch log and checkpoints.
pub trait TrainSink {
    fn epoch(&mut self, record: &EpochRecord) -> Result<()>;
    fn checkpoint(&mut self, kind: CheckpointKind, checkpoint: &Checkpoint) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {
    fn epoch(&mut self, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _: CheckpointKind, _: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// Writes `metrics.csv` and checkpoint files into a directory.
pub struct DirSink {
    dir: PathBuf,
    writer: csv::Writer<File>,
}

impl DirSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn path(&self, kind: CheckpointKind) -> PathBuf {
        self.dir.join(match kind {
            CheckpointKind::Best => BEST_CHECKPOINT,
            CheckpointKind::Last => LAST_CHECKPOINT,
            CheckpointKind::LastGood => LAST_GOOD_CHECKPOINT,
        })
    }
}

impl TrainSink for DirSink {
    fn epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
        self.writer.serialize(record).map_err(err)?;
        self.writer.flush().map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&mut self, kind: CheckpointKind, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.path(kind))
    }
}

pub struct TrainOutcome {
    /// Parameters with the best validation minFDE, or the final ones when
    /// there is no validation set.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Train a freshly initialised model.
pub fn train(config: &RunConfig, data: &Dataset, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.model.clone(), config.train.seed)?;
    train_model(model, config, data, sink)
}

pub fn train_model(
    mut model: Model,
    config: &RunConfig,
    data: &Dataset,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    let arch = config.architecture();
    let weights = LossWeights::from_config(tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let val = prepare_all(&data.val, &config.kalman);
    let fixed = (!tc.augment).then(|| prepare_all(&data.train, &config.kalman));
    if data.train.is_empty() {
        return Err(Error::Empty("no training scenes".into()));
    }

    let mut adam = Adam::new(&model.params, tc.learning_rate);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..tc.epochs {
        let alpha = if tc.wta { WtaSchedule::alpha_at(epoch, tc.epochs) } else { 1.0 };
        let wta = tc.wta_schedule().with_alpha(alpha);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for chunk in order.chunks(tc.batch_size) {
            let prepared: Vec<PreparedScene> = match &fixed {
                Some(_) => Vec::new(),
                None => chunk
                    .iter()
                    .filter_map(|&i| {
                        let t = sample_se2_with(&mut rng);
                        PreparedScene::new(&data.train[i].apply_se2(&t), &config.kalman).ok()
                    })
                    .collect(),
            };
            let refs: Vec<&PreparedScene> = match &fixed {
                Some(f) => chunk.iter().filter_map(|&i| f.get(i)).collect(),
                None => prepared.iter().collect(),
            };
            if refs.is_empty() {
                continue;
            }
            let Some((terms, mut grads)) = batch_gradients(&model, &refs, arch, tc.explicit, weights, &wta)? else {
                continue;
            };
            if !terms.total.is_finite() || !grads.all_finite() {
                let ck = Checkpoint::new(&model, config, arch, epoch);
                sink.checkpoint(CheckpointKind::LastGood, &ck)?;
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} (terms {terms:?}); parameters before this step were saved"
                )));
            }
            if tc.grad_clip > 0.0 {
                grads.clip_global_norm(tc.grad_clip);
            }
            adam.step(&mut model.params, &grads);
            for (k, v) in [terms.full, terms.social, terms.map].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val, arch, tc.eval_batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            loss_full: mean(0),
            loss_social: mean(1),
            loss_map: mean(2),
            val_min_ade: report.as_ref().map(|r| r.min_ade),
            val_min_fde: report.as_ref().map(|r| r.min_fde),
            val_miss_rate: report.as_ref().map(|r| r.miss_rate),
            val_dac: report.as_ref().and_then(|r| r.dac),
            alpha,
            learning_rate: adam.lr,
        };
        log::info!(
            "epoch {epoch}: loss {:?} val minFDE {:?} alpha {alpha:.3} lr {:.2e}",
            record.loss_full.or(record.loss_social).or(record.loss_map),
            record.val_min_fde,
            adam.lr
        );
        sink.epoch(&record)?;
        history.push(record);

        let score = report.as_ref().map(|r: &MetricReport| r.min_fde);
        let improved = match (score, &best) {
            (Some(s), Some((b, _, _))) => s < *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((score.unwrap(), epoch, model.params.clone()));
            sink.checkpoint(CheckpointKind::Best, &Checkpoint::new(&model, config, arch, epoch))?;
            stale = 0;
        } else if score.is_some() {
            stale += 1;
            if stale >= tc.plateau_patience.max(1) {
                adam.lr *= tc.lr_decay;
                stale = 0;
            }
        }
    }
    let last_epoch = tc.epochs - 1;
    sink.checkpoint(CheckpointKind::Last, &Checkpoint::new(&model, config, arch, last_epoch))?;
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => {
            sink.checkpoint(CheckpointKind::Best, &Checkpoint::new(&model, config, arch, last_epoch))?;
            last_epoch
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Rows of the module and training-technique ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    /// Full network with explicit training, augmentation and soft WTA.
    Full,
    NoExplicit,
    NoExplicitNoAugment,
    /// Plain mixture likelihood only.
    NoTechniques,
    /// Agent-to-lane attention once, after the encoder.
    MapInEncoder,
    NoMap,
    /// Encoder and decoder without social or map attention.
    NoSocialNoMap,
}

impl AblationRow {
    pub const ALL: [AblationRow; 7] = [
        AblationRow::Full,
        AblationRow::NoExplicit,
        AblationRow::NoExplicitNoAugment,
        AblationRow::NoTechniques,
        AblationRow::MapInEncoder,
        AblationRow::NoMap,
        AblationRow::NoSocialNoMap,
    ];

    /// Rows expected to have increasing validation minFDE.
    pub const MODULE_ORDER: [AblationRow; 5] = [
        AblationRow::Full,
        AblationRow::NoExplicit,
        AblationRow::MapInEncoder,
        AblationRow::NoMap,
        AblationRow::NoSocialNoMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoExplicit => "no_explicit",
            AblationRow::NoExplicitNoAugment => "no_explicit_no_augment",
            AblationRow::NoTechniques => "no_techniques",
            AblationRow::MapInEncoder => "map_in_encoder",
            AblationRow::NoMap => "no_map",
            AblationRow::NoSocialNoMap => "no_social_no_map",
        }
    }

    /// `base` with this row's architecture and technique switches. The
    /// module rows keep soft WTA and augmentation but drop explicit
    /// training.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        use crate::model::MapPlacement;
        let mut c = base.clone();
        c.train.variant = Variant::Full;
        let (explicit, augment, wta) = match self {
            AblationRow::Full => (true, true, true),
            AblationRow::NoExplicitNoAugment => (false, false, true),
            AblationRow::NoTechniques => (false, false, false),
            _ => (false, true, true),
        };
        c.train.explicit = explicit;
        c.train.augment = augment;
        c.train.wta = wta;
        let map = match self {
            AblationRow::MapInEncoder => MapPlacement::Encoder,
            AblationRow::NoMap | AblationRow::NoSocialNoMap => MapPlacement::None,
            _ => MapPlacement::Decoder,
        };
        c.architecture = Some(Architecture {
            encoder: true,
            social: self != AblationRow::NoSocialNoMap,
            map,
        });
        c
    }
}

impl std::str::FromStr for AblationRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{AgentTrack, Polyline};

    fn micro_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            modes: 2,
            n_obs: 6,
            n_pred: 5,
            ..ModelConfig::default()
        }
    }

    fn micro_scene() -> Scene {
        let dt = 0.1;
        let n = 11;
        let ts: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let a = AgentTrack::new(
            "a",
            (0..n).map(|k| [k as f64 * 0.8, 0.05 * (k as f64).powi(2) * 0.1]).collect(),
            ts.clone(),
        );
        let b = AgentTrack::new("b", (0..n).map(|k| [3.0 - k as f64 * 0.5, 3.5]).collect(), ts);
        Scene {
            scene_id: "micro".into(),
            dt,
            n_obs: 6,
            n_pred: 5,
            anchor_id: "a".into(),
            agents: vec![a, b],
            polylines: vec![
                Polyline::new(vec![[-10.0, 0.0], [0.0, 0.0], [10.0, 0.5]], 2.0).unwrap(),
                Polyline::new(vec![[10.0, 3.5], [-10.0, 3.5]], 2.0).unwrap(),
            ],
            frame: Default::default(),
        }
    }

    fn loss_value(model: &Model, p: &PreparedScene, explicit: bool, w: LossWeights) -> f64 {
        let batch = Batch::new(vec![p]).unwrap();
        let mut tape = Tape::new();
        let wta = WtaSchedule::default();
        let (_, t) = explicit_training_loss(model, &mut tape, &batch, Variant::Full.architecture(), explicit, w, &wta)
            .unwrap()
            .unwrap();
        t.total
    }

    const ALL: LossWeights = LossWeights { full: 1.0, social: 0.7, map: 1.3 };

    #[test]
    fn targets_use_finite_differences() {
        let p = PreparedScene::new(&micro_scene(), &KalmanConfig::default()).unwrap();
        let t = agent_targets(&p, 0, 5, 0.1);
        let f = p.future[0][0].unwrap();
        let last = p.scene.agents[0].positions[5];
        let v = t[0].unwrap();
        assert_eq!([v[0], v[1]], f);
        assert!((v[2] - (f[0] - last[0]) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut model = Model::new(micro_config(), 11).unwrap();
        let p = PreparedScene::new(&micro_scene(), &KalmanConfig::default()).unwrap();
        let wta = WtaSchedule::default();
        let (_, grads) = batch_gradients(&model, &[&p], Variant::Full.architecture(), true, ALL, &wta)
            .unwrap()
            .unwrap();
        let h = 1e-5;
        let mut checked = 0;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let len = model.params.get(id).len();
            for k in [0, len / 2, len - 1] {
                let orig = model.params.get(id).data()[k];
                model.params.get_mut(id).data_mut()[k] = orig + h;
                let lp = loss_value(&model, &p, true, ALL);
                model.params.get_mut(id).data_mut()[k] = orig - h;
                let lm = loss_value(&model, &p, true, ALL);
                model.params.get_mut(id).data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(id).map_or(0.0, |g| g.data()[k]);
                let tol = 1e-4 * fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() <= tol, "{} [{k}]: fd {fd} vs {an}", model.params.name(id));
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn zero_sub_weights_equal_plain_full_training() {
        let model = Model::new(micro_config(), 5).unwrap();
        let p = PreparedScene::new(&micro_scene(), &KalmanConfig::default()).unwrap();
        let wta = WtaSchedule::default().with_alpha(0.4);
        let arch = Variant::Full.architecture();
        let zero = LossWeights { full: 1.0, social: 0.0, map: 0.0 };
        let (ta, ga) = batch_gradients(&model, &[&p], arch, true, zero, &wta).unwrap().unwrap();
        let (tb, gb) = batch_gradients(&model, &[&p], arch, false, ALL, &wta).unwrap().unwrap();
        assert_eq!(ta.total, tb.total);
        for id in model.params.ids() {
            assert_eq!(ga.get(id), gb.get(id), "{}", model.params.name(id));
        }
    }

    #[test]
    fn shared_weights_receive_sub_network_gradients() {
        // With cloned sub-network weights the full network's parameters
        // would only see the full term.
        let model = Model::new(micro_config(), 5).unwrap();
        let p = PreparedScene::new(&micro_scene(), &KalmanConfig::default()).unwrap();
        let wta = WtaSchedule::default();
        let arch = Variant::Full.architecture();
        let (_, joint) = batch_gradients(&model, &[&p], arch, true, ALL, &wta).unwrap().unwrap();
        let (_, alone) = batch_gradients(&model, &[&p], arch, false, ALL, &wta).unwrap().unwrap();
        let trc = model.params.id_of("decoder.trc.hidden").unwrap();
        let diff: f64 = joint.get(trc).unwrap().data().iter().zip(alone.get(trc).unwrap().data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8);
        let head = model.params.ids().find(|id| model.params.name(*id).starts_with("decoder.head")).unwrap();
        assert_ne!(joint.get(head), alone.get(head));
    }

    #[test]
    fn training_is_deterministic_and_logs_alpha() {
        let cfg = RunConfig {
            model: micro_config(),
            train: TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        let data = Dataset {
            train: vec![micro_scene(); 3],
            val: vec![micro_scene()],
        };
        let a = train(&cfg, &data, &mut NullSink).unwrap();
        let b = train(&cfg, &data, &mut NullSink).unwrap();
        assert_eq!(a.history, b.history);
        for r in &a.history {
            assert!((r.alpha - (1.0 - r.epoch as f64 / 3.0)).abs() < 1e-9);
            assert!(r.loss_social.is_some() && r.loss_map.is_some());
        }
    }

    #[test]
    fn plain_training_keeps_alpha_at_one() {
        let cfg = RunConfig {
            model: micro_config(),
            train: TrainConfig {
                epochs: 2,
                explicit: false,
                wta: false,
                augment: false,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        let data = Dataset { train: vec![micro_scene()], val: Vec::new() };
        let out = train(&cfg, &data, &mut NullSink).unwrap();
        for r in &out.history {
            assert_eq!(r.alpha, 1.0);
            assert!(r.loss_full.is_some() && r.loss_social.is_none() && r.loss_map.is_none());
        }
    }

    #[test]
    fn dir_sink_writes_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            model: micro_config(),
            train: TrainConfig { epochs: 2, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        let data = Dataset { train: vec![micro_scene()], val: vec![micro_scene()] };
        let mut sink = DirSink::create(dir.path()).unwrap();
        train(&cfg, &data, &mut sink).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss_full,loss_social,loss_map,val_minADE,val_minFDE,val_MR,val_DAC,alpha");
        assert_eq!(lines.len(), 3);
        assert!(Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).is_ok());
    }

    #[test]
    fn ablation_rows_configure_architecture() {
        let base = RunConfig::default();
        let full = AblationRow::Full.apply(&base);
        assert!(full.train.explicit && full.architecture() == Variant::Full.architecture());
        let no_map = AblationRow::NoMap.apply(&base);
        assert_eq!(no_map.architecture(), Variant::SocialOnly.architecture());
        assert!(!no_map.train.explicit && no_map.train.wta && no_map.train.augment);
        let basis = AblationRow::NoSocialNoMap.apply(&base).architecture();
        assert!(basis.encoder && !basis.social);
        for r in AblationRow::ALL {
            assert_eq!(r.name().parse::<AblationRow>().unwrap(), r);
        }
    }

    #[test]
    fn logged_loss_ignores_wta_factors() {
        let model = Model::new(micro_config(), 2).unwrap();
        let p = PreparedScene::new(&micro_scene(), &KalmanConfig::default()).unwrap();
        let arch = Variant::Full.architecture();
        let sharp = WtaSchedule::default().with_alpha(0.0);
        let (a, _) = batch_gradients(&model, &[&p], arch, true, ALL, &sharp).unwrap().unwrap();
        let (b, _) = batch_gradients(&model, &[&p], arch, true, ALL, &WtaSchedule::default()).unwrap().unwrap();
        assert!((a.full.unwrap() - b.full.unwrap()).abs() < 1e-9);
        assert!((a.map.unwrap() - b.map.unwrap()).abs() < 1e-9);
        assert_ne!(a.total, b.total);
    }
}
