use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dfrnn::checkpoint::Checkpoint;
use dfrnn::config::RunConfig;
use dfrnn::io::load_dir;
use dfrnn::metrics::{evaluate, junction_probe_report, MetricReport, ProbeReport};
use dfrnn::model::{Architecture, Model};
use dfrnn::scene::Scene;
use dfrnn::synth::{generate_dataset, MANIFEST_FILE as DATASET_MANIFEST};
use dfrnn::train::{prepare_all, train, AblationRow, Dataset, DirSink, BEST_CHECKPOINT, METRICS_FILE};
use serde::Serialize;

use crate::plot::render_scene;
use crate::run::{io_err, resolve_out, CliError, RunManifest};
use crate::{AblateArgs, EvalArgs, GenerateArgs, TrainArgs, TrainFlags};

/// Probe seeds start here so they never coincide with dataset seeds drawn
/// by index.
const PROBE_SEED_BASE: u64 = 0x0f16_3000_0000;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let out = resolve_out(&a.out);
    let mut manifest = RunManifest::start("generate");
    manifest.seed = Some(a.seed);
    let mix = a.mix.unwrap_or_default();
    let d = generate_dataset(a.n, &mix, a.seed, &out)?;
    let (train, val) = d.scenes.iter().fold((0, 0), |(t, v), e| if e.split == "val" { (t, v + 1) } else { (t + 1, v) });
    println!("wrote {} scenes ({train} train, {val} val) to {}", d.scenes.len(), out.display());
    manifest.outputs = vec![display(&out.join(DATASET_MANIFEST)), display(&out.join("train")), display(&out.join("val"))];
    manifest.finish(&out)
}

fn run_config(flags: &TrainFlags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    cfg.train.wta &= !flags.no_wta;
    cfg.train.augment &= !flags.no_augment;
    cfg.train.explicit &= !flags.no_explicit;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let data = Dataset::load(dir)?;
    if data.train.is_empty() {
        return Err(dfrnn::Error::Empty(format!("no training scenes in {}", dir.display())).into());
    }
    Ok(data)
}

pub fn train_cmd_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = run_config(&a.flags)?;
    if let Some(v) = a.variant {
        cfg.train.variant = v;
        cfg.architecture = None;
    }
    if a.map.is_some() || a.no_social {
        let mut arch = cfg.architecture();
        if let Some(m) = a.map {
            arch.map = m;
        }
        arch.social &= !a.no_social;
        cfg.architecture = Some(arch);
    }
    Ok(cfg)
}

pub fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = train_cmd_config(&a)?;
    let data = load_dataset(&a.data)?;
    let out = resolve_out(&a.out);
    let mut manifest = RunManifest::start("train");
    let summary = train_into(&cfg, &data, &out)?;
    manifest.config = Some(cfg.to_toml());
    manifest.seed = Some(cfg.train.seed);
    manifest.outputs = summary.outputs.clone();
    println!(
        "best epoch {} val minFDE {}",
        summary.best_epoch,
        summary.val.as_ref().map_or("n/a".into(), |r| format!("{:.4}", r.min_fde))
    );
    manifest.finish(&out)
}

struct TrainSummary {
    best_epoch: usize,
    val: Option<MetricReport>,
    model: Model,
    outputs: Vec<String>,
}

fn train_into(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainSummary, CliError> {
    create_dir(out)?;
    let arch = cfg.architecture();
    if cfg.train.explicit && arch != dfrnn::model::Variant::Full.architecture() {
        log::warn!("explicit training needs the full architecture; training {arch:?} alone");
    }
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let mut sink = DirSink::create(out)?;
    let outcome = train(cfg, data, &mut sink)?;
    let val = prepare_all(&data.val, &cfg.kalman);
    let report = if val.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.model, &val, arch, cfg.train.eval_batch_size)?)
    };
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        val: report,
        model: outcome.model,
        outputs: [METRICS_FILE, BEST_CHECKPOINT, "last.ckpt", "config.toml"]
            .iter()
            .map(|f| display(&out.join(f)))
            .collect(),
    })
}

fn eval_scenes(data: &Path, split: &str) -> Result<Vec<Scene>, CliError> {
    let sub = data.join(split);
    let dir = if sub.is_dir() { sub } else { data.to_path_buf() };
    Ok(load_dir(&dir)?)
}

fn probe(model: &Model, arch: Architecture, cfg: &RunConfig, n: usize) -> Result<ProbeReport, CliError> {
    let seeds: Vec<u64> = (0..n as u64).map(|k| PROBE_SEED_BASE + k).collect();
    Ok(junction_probe_report(model, arch, &cfg.kalman, &seeds)?)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let arch = ck.architecture;
    let scenes = eval_scenes(&a.data, &a.split)?;
    let prepared = prepare_all(&scenes, &ck.config.kalman);
    if prepared.is_empty() {
        return Err(dfrnn::Error::Empty(format!("no usable scenes in {}", a.data.display())).into());
    }
    let out = resolve_out(&a.out);
    create_dir(&out)?;
    let mut manifest = RunManifest::start("eval");
    manifest.config = Some(ck.config.to_toml());
    manifest.seed = Some(ck.config.train.seed);

    let report = evaluate(&model, &prepared, arch, ck.config.train.eval_batch_size)?;
    let table = report.table();
    print!("{table}");
    write(&out.join("report.json"), &report.to_json()?)?;
    write(&out.join("report.txt"), &table)?;
    manifest.outputs = vec![display(&out.join("report.json")), display(&out.join("report.txt"))];

    if a.probes > 0 {
        let p = probe(&model, arch, &ck.config, a.probes)?;
        println!("junction probes: both branches covered in {:.1}%", 100.0 * p.both_covered);
        let path = out.join("probe.json");
        write(&path, &serde_json::to_string_pretty(&p).expect("serialisable"))?;
        manifest.outputs.push(display(&path));
    }

    if let Some(ids) = &a.plot {
        let dir = out.join("plots");
        create_dir(&dir)?;
        let chosen: Vec<_> = if ids.is_empty() {
            prepared.iter().take(8).collect()
        } else {
            let mut v = Vec::new();
            for id in ids {
                match prepared.iter().find(|p| &p.scene.scene_id == id) {
                    Some(p) => v.push(p),
                    None => return Err(CliError::Usage(format!("--plot: no scene {id:?} in the evaluated set"))),
                }
            }
            v
        };
        for p in chosen {
            let path = dir.join(format!("{}.png", p.scene.scene_id));
            let pred = model.forward(p, arch)?;
            render_scene(p, &pred, &path)?;
            manifest.outputs.push(display(&path));
        }
    }
    manifest.finish(&out)
}

#[derive(Serialize)]
struct AblationResult {
    row: AblationRow,
    best_epoch: usize,
    val_min_ade: Option<f64>,
    val_min_fde: Option<f64>,
    val_miss_rate: Option<f64>,
    val_dac: Option<f64>,
    probe_both_covered: Option<f64>,
    seconds: f64,
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let base = run_config(&a.flags)?;
    let rows: Vec<AblationRow> = if a.rows.is_empty() {
        AblationRow::ALL.to_vec()
    } else {
        a.rows.iter().map(|r| r.parse()).collect::<Result<_, _>>()?
    };
    let data = load_dataset(&a.data)?;
    let out = resolve_out(&a.out);
    create_dir(&out)?;
    let mut manifest = RunManifest::start("ablate");
    manifest.config = Some(base.to_toml());
    manifest.seed = Some(base.train.seed);
    let mut results = Vec::new();
    for row in rows {
        let cfg = row.apply(&base);
        let dir: PathBuf = out.join(row.name());
        log::info!("ablation row {}", row.name());
        let t = Instant::now();
        let mut row_manifest = RunManifest::start("ablate-row");
        let s = train_into(&cfg, &data, &dir)?;
        let probe = if a.probes > 0 { Some(probe(&s.model, cfg.architecture(), &cfg, a.probes)?) } else { None };
        row_manifest.config = Some(cfg.to_toml());
        row_manifest.seed = Some(cfg.train.seed);
        row_manifest.outputs = s.outputs.clone();
        row_manifest.finish(&dir)?;
        manifest.outputs.push(display(&dir));
        results.push(AblationResult {
            row,
            best_epoch: s.best_epoch,
            val_min_ade: s.val.as_ref().map(|r| r.min_ade),
            val_min_fde: s.val.as_ref().map(|r| r.min_fde),
            val_miss_rate: s.val.as_ref().map(|r| r.miss_rate),
            val_dac: s.val.as_ref().and_then(|r| r.dac),
            probe_both_covered: probe.map(|p| p.both_covered),
            seconds: t.elapsed().as_secs_f64(),
        });
        write(&out.join("ablation.json"), &serde_json::to_string_pretty(&results).expect("serialisable"))?;
    }
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut table = format!("{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "row", "minADE", "minFDE", "MR", "DAC", "probe");
    for r in &results {
        table += &format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            r.row.name(),
            fmt(r.val_min_ade),
            fmt(r.val_min_fde),
            fmt(r.val_miss_rate),
            fmt(r.val_dac),
            fmt(r.probe_both_covered)
        );
    }
    print!("{table}");
    write(&out.join("ablation.txt"), &table)?;
    manifest.outputs.push(display(&out.join("ablation.json")));
    manifest.finish(&out)
}


