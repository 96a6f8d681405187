use std::fs;
use std::path::{Path, PathBuf};

use msef::backbone::{init_backbone, BackboneWeights};
use msef::checkpoint::{write_atomic, Checkpoint};
use msef::data::{
    load_csv, make_eval_windows, make_splits, make_windows, synth, write_csv, write_sidecar, RawSeries, SplitSpec,
    SynthKind,
};
use msef::eval::{
    average_over_horizons, evaluate, load_report, run_ablation, AblationReport, AblationSpec, MetricRow,
};
use msef::fusion::{normalize_instance, MsefModel};
use msef::numerics::{Real, Tensor};
use msef::training::train;
use msef::tsfm::{init_tsfm, pretrain_masked, TsfmWeights};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub const CONFIG_FILE: &str = "config.txt";
pub const BACKBONE_FILE: &str = "backbone.msef";
pub const TSFM_FILE: &str = "tsfm.msef";
pub const CHECKPOINT_FILE: &str = "checkpoint.msef";
pub const HISTORY_FILE: &str = "history.json";

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn horizon_dir(run: &Path, h: usize) -> PathBuf {
    run.join(format!("H{h}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn synth_cmd(kind: &str, length: usize, channels: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let kind = SynthKind::named(kind)?;
    let series = synth(&kind, length, channels, seed)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join(format!("{}.csv", kind.name()));
    write_csv(&series, &path)?;
    write_sidecar(&series, &path.with_extension("json"))?;
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    println!("{}  {}", path.display(), sha256_hex(&bytes));
    Ok(())
}

pub fn load_series(cfg: &RunConfig) -> Result<RawSeries, Failure> {
    match (cfg.data_path(), cfg.synth_spec()?) {
        (Some(_), Some(_)) => Err(Failure::usage("give either data or synth, not both")),
        (Some(p), None) => {
            if !p.exists() {
                return Err(Failure::usage(format!("data file {} does not exist", p.display())));
            }
            Ok(load_csv(&p)?)
        }
        (None, Some((kind, len, ch, seed))) => Ok(synth(&kind, len, ch, seed)?),
        (None, None) => Err(Failure::usage("no dataset: give --data or --synth")),
    }
}

/// Normalized windows of length T from the few-shot range, half-overlapping.
fn pretrain_corpus<T: Real>(series: &RawSeries, split: &SplitSpec, lookback: usize) -> Result<Vec<Tensor<T>>, Failure> {
    let range = split.few_shot.clone();
    if range.len() < lookback {
        return Err(Failure::usage(format!(
            "few-shot range of {} steps is shorter than the lookback {lookback}",
            range.len()
        )));
    }
    let stride = (lookback / 2).max(1);
    let mut corpus = Vec::new();
    for c in 0..series.n_channels() {
        let ch = series.channel(c);
        for start in (range.start..=range.end - lookback).step_by(stride) {
            let (norm, _) = normalize_instance(&ch[start..start + lookback]);
            corpus.push(Tensor::new([lookback], norm.into_iter().map(T::lit).collect())?);
        }
    }
    Ok(corpus)
}

fn build_tsfm<T: Real>(cfg: &RunConfig, series: &RawSeries, split: &SplitSpec) -> Result<(TsfmWeights<T>, Option<Vec<f64>>), Failure> {
    if let Some(path) = cfg.tsfm_checkpoint() {
        if !path.exists() {
            return Err(Failure::usage(format!("tsfm checkpoint {} does not exist", path.display())));
        }
        return Ok((TsfmWeights::from_checkpoint(&Checkpoint::read(&path)?)?, None));
    }
    let opts = cfg.pretrain()?;
    let tcfg = cfg.tsfm()?;
    if opts.epochs == 0 {
        return Ok((init_tsfm(&tcfg)?, None));
    }
    let corpus = pretrain_corpus::<T>(series, split, cfg.fusion("check")?.lookback)?;
    let out = pretrain_masked(&corpus, &tcfg, &opts)?;
    Ok((out.weights, Some(out.epoch_losses)))
}

pub fn pretrain_cmd<T: Real>(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.out_dir()?;
    let series = load_series(cfg)?;
    let split = make_splits(series.len(), cfg.scheme()?, cfg.train()?.few_shot_ratio)?;
    let mut opts = cfg.pretrain()?;
    if opts.epochs == 0 {
        opts.epochs = 10;
    }
    let corpus = pretrain_corpus::<T>(&series, &split, cfg.fusion("check")?.lookback)?;
    let result = pretrain_masked(&corpus, &cfg.tsfm()?, &opts)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    result.weights.to_checkpoint().write(&out.join(TSFM_FILE))?;
    let losses = serde_json::to_string_pretty(&serde_json::json!({ "epoch_losses": result.epoch_losses }))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    write_text(&out.join("pretrain.json"), &losses)?;
    for (e, l) in result.epoch_losses.iter().enumerate() {
        println!("epoch {e:>3}  reconstruction mse {l:.6}");
    }
    println!("wrote {}", out.join(TSFM_FILE).display());
    Ok(())
}

pub fn train_cmd<T: Real>(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.out_dir()?;
    let series = load_series(cfg)?;
    let tcfg = cfg.train()?;
    let fcfg = cfg.fusion(&series.name)?;
    let split = make_splits(series.len(), cfg.scheme()?, tcfg.few_shot_ratio)?;
    split.check_capacity(fcfg.lookback, fcfg.horizon)?;
    let backbone = init_backbone::<T>(&cfg.backbone()?)?;
    let (tsfm, pretrain_losses) = build_tsfm::<T>(cfg, &series, &split)?;

    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    backbone.to_checkpoint().write(&out.join(BACKBONE_FILE))?;
    tsfm.to_checkpoint().write(&out.join(TSFM_FILE))?;
    if let Some(l) = pretrain_losses {
        println!("pretrained tsfm: reconstruction mse {:.6} -> {:.6}", l[0], l[l.len() - 1]);
    }

    let (t, h) = (fcfg.lookback, fcfg.horizon);
    let mut model = MsefModel::new(backbone, tsfm, fcfg)?;
    let tr = make_windows::<T>(&series, split.few_shot.clone(), t, h, cfg.train_stride()?)?;
    let va = make_eval_windows::<T>(&series, split.val.clone(), t, h, cfg.eval_stride()?)?;
    let te = make_eval_windows::<T>(&series, split.test.clone(), t, h, cfg.eval_stride()?)?;
    let outcome = train(&mut model, &tr, &va, &tcfg)?;
    let mut history = outcome.history;
    let metrics = evaluate(&model, &te, 1)?;
    history.test = Some(metrics);

    let dir = horizon_dir(&out, h);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    outcome.checkpoint.write(&dir.join(CHECKPOINT_FILE))?;
    write_text(&dir.join(HISTORY_FILE), &history.to_json()?)?;
    println!(
        "{} {} H={h}: {} trainable, best epoch {} (val {:.6}), test mse {:.6} mae {:.6} over {} windows",
        series.name,
        model.config().mode,
        history.trainable_params,
        history.best_epoch,
        history.best_val_loss,
        metrics.mse,
        metrics.mae,
        metrics.n_windows
    );
    Ok(())
}

fn read_run_config(run: &Path) -> Result<RunConfig, Failure> {
    let path = run.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Failure::usage(format!("{} is not a run directory (no {CONFIG_FILE})", run.display())));
    }
    let mut cfg = RunConfig::default();
    cfg.apply_file(&path)?;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("missing checkpoint {}", path.display())));
    }
    Ok(Checkpoint::read(path)?)
}

pub struct EvalRequest {
    pub run: PathBuf,
    pub horizons: Option<Vec<usize>>,
    pub avg: bool,
    pub data: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

pub fn eval_cmd(req: &EvalRequest) -> Result<(), Failure> {
    let mut cfg = read_run_config(&req.run)?;
    if let Some(d) = &req.data {
        cfg.set("data", &d.display().to_string())?;
        cfg.set("synth", "-")?;
    }
    match cfg.precision()? {
        msef::numerics::Precision::F32 => eval_run::<f32>(&cfg, req),
        msef::numerics::Precision::F64 => eval_run::<f64>(&cfg, req),
    }
}

fn eval_run<T: Real>(cfg: &RunConfig, req: &EvalRequest) -> Result<(), Failure> {
    let horizons = match &req.horizons {
        Some(h) => h.clone(),
        None => vec![cfg.horizon()?],
    };
    let backbone: BackboneWeights<T> = BackboneWeights::from_checkpoint(&read_checkpoint(&req.run.join(BACKBONE_FILE))?)?;
    let tsfm: TsfmWeights<T> = TsfmWeights::from_checkpoint(&read_checkpoint(&req.run.join(TSFM_FILE))?)?;
    let fusion_cks: Vec<(usize, Checkpoint)> = horizons
        .iter()
        .map(|&h| read_checkpoint(&horizon_dir(&req.run, h).join(CHECKPOINT_FILE)).map(|c| (h, c)))
        .collect::<Result<_, _>>()?;
    let series = load_series(cfg)?;
    let split = make_splits(series.len(), cfg.scheme()?, cfg.train()?.few_shot_ratio)?;
    let mut rows = Vec::new();
    for (h, ck) in fusion_cks {
        let model = MsefModel::from_checkpoint(&ck, backbone.clone(), tsfm.clone())?;
        if model.config().horizon != h {
            return Err(Failure::usage(format!(
                "checkpoint in H{h} was trained for horizon {}",
                model.config().horizon
            )));
        }
        let te = make_eval_windows::<T>(&series, split.test.clone(), model.config().lookback, h, cfg.eval_stride()?)?;
        let m = evaluate(&model, &te, 1)?;
        let seed = model.config().init_seed;
        rows.push(MetricRow {
            trainable_params: Some(model.trainable_count()),
            ..MetricRow::new(&series.name, model.config().mode.as_str(), h, Some(seed), m)
        });
    }
    let mut summaries = Vec::new();
    if req.avg {
        summaries.push(average_over_horizons(&rows)?);
    }
    for r in rows.iter().chain(&summaries) {
        println!("{}", serde_json::to_string(r).map_err(|e| Failure::runtime(e.to_string()))?);
    }
    let report = AblationReport { rows, summaries };
    let json = req.json.clone().unwrap_or_else(|| req.run.join("eval.json"));
    write_text(&json, &report.to_json()?)?;
    Ok(())
}

pub struct AblateOutput {
    pub report: AblationReport,
}

pub fn ablate_cmd<T: Real>(cfg: &RunConfig, csv: bool) -> Result<AblateOutput, Failure> {
    let out = cfg.out_dir()?;
    let cells = cfg.cells()?;
    let horizons = cfg.horizons()?;
    let seeds = cfg.seeds()?;
    let series = load_series(cfg)?;
    let split = make_splits(series.len(), cfg.scheme()?, cfg.train()?.few_shot_ratio)?;
    let backbone = init_backbone::<T>(&cfg.backbone()?)?;
    let (tsfm, _) = build_tsfm::<T>(cfg, &series, &split)?;
    let spec = AblationSpec {
        series: &series,
        scheme: cfg.scheme()?,
        backbone: &backbone,
        tsfm: &tsfm,
        cells,
        horizons,
        seeds,
        fusion: cfg.fusion(&series.name)?,
        train: cfg.train()?,
        train_stride: cfg.train_stride()?,
        eval_stride: cfg.eval_stride()?,
    };
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let report = run_ablation(&spec)?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    let table = report.to_table();
    write_text(&out.join("report.txt"), &table)?;
    if csv {
        write_text(&out.join("report.csv"), &report.to_csv()?)?;
    }
    print!("{table}");
    for r in report.rows.iter().filter(|r| r.failed()) {
        eprintln!(
            "cell {} H={} seed {:?} failed: {}",
            r.mode,
            r.horizon,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(AblateOutput { report })
}

pub fn report_cmd(input: &Path, format: &str, out: Option<&Path>) -> Result<(), Failure> {
    if !input.exists() {
        return Err(Failure::usage(format!("report {} does not exist", input.display())));
    }
    let report = load_report(input)?;
    let text = match format {
        "table" => report.to_table(),
        "csv" => report.to_csv()?,
        "json" => report.to_json()? + "\n",
        other => return Err(Failure::usage(format!("unknown format {other:?} (table|csv|json)"))),
    };
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
