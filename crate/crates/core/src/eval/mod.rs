//! Metrics, horizon averaging and the ablation harness.

mod report;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use report::{load_report, AblationReport};

use crate::backbone::BackboneWeights;
use crate::data::{make_eval_windows, make_splits, make_windows, ForecastWindow, RawSeries, SplitScheme};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Mode, MsefModel};
use crate::numerics::{Real, Tensor};
use crate::training::{prepare_items, train_on_items, TrainConfig, TrainItem};
use crate::tsfm::TsfmWeights;

/// Horizons whose average is reported as the `avg` row.
pub const STANDARD_HORIZONS: [usize; 4] = [96, 192, 336, 720];

fn paired<'a, T: Real>(pred: &'a Tensor<T>, target: &'a Tensor<T>, op: &'static str) -> Result<impl Iterator<Item = f64> + 'a> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::Empty("metric input"));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| a.as_f64() - b.as_f64()))
}

/// Mean squared elementwise difference.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.numel() as f64;
    Ok(paired(pred, target, "mse")?.map(|d| d * d).sum::<f64>() / n)
}

/// Mean absolute elementwise difference.
pub fn mae<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.numel() as f64;
    Ok(paired(pred, target, "mae")?.map(f64::abs).sum::<f64>() / n)
}

/// Errors averaged over every window, channel and horizon step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

/// Anything mapping an `N × T` window to an `N × H` forecast.
pub trait Forecaster<T: Real>: Sync {
    fn forecast_window(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Forecaster<T> for MsefModel<T> {
    fn forecast_window(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forecast(x)
    }
}

/// Scores `model` on `windows`, forecasting `batch` windows concurrently.
///
/// Sums are accumulated in window order, so the result does not depend on
/// `batch`.
pub fn evaluate<T: Real, F: Forecaster<T> + ?Sized>(
    model: &F,
    windows: &[ForecastWindow<T>],
    batch: usize,
) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in windows.chunks(batch.max(1)) {
        let preds: Vec<Tensor<T>> = chunk
            .par_iter()
            .map(|w| model.forecast_window(&w.x))
            .collect::<Result<_>>()?;
        for (p, w) in preds.iter().zip(chunk) {
            for d in paired(p, &w.y, "evaluate")? {
                se += d * d;
                ae += d.abs();
            }
            n += p.numel();
        }
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        n_windows: windows.len(),
    })
}

/// [`evaluate`] over prepared items, in item order.
///
/// Items built by [`prepare_items`] from `n_windows` windows give the same
/// sums, in the same order, as evaluating those windows directly.
pub fn evaluate_items<T: Real>(model: &MsefModel<T>, items: &[TrainItem<T>], n_windows: usize) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    let preds: Vec<Vec<T>> = items
        .par_iter()
        .map(|it| model.forecast_prepared(&it.input))
        .collect::<Result<_>>()?;
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, it) in preds.iter().zip(items) {
        let p = Tensor::new(it.target.shape().to_vec(), p.clone())?;
        for d in paired(&p, &it.target, "evaluate_items")? {
            se += d * d;
            ae += d.abs();
        }
        n += p.numel();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        n_windows,
    })
}

/// A forecast horizon or the across-horizon average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HorizonLabel {
    Steps(usize),
    Avg,
}

impl std::fmt::Display for HorizonLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HorizonLabel::Steps(h) => write!(f, "{h}"),
            HorizonLabel::Avg => f.write_str("avg"),
        }
    }
}

impl Serialize for HorizonLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HorizonLabel::Steps(h) => s.serialize_u64(*h as u64),
            HorizonLabel::Avg => s.serialize_str("avg"),
        }
    }
}

impl<'de> Deserialize<'de> for HorizonLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(h) => Ok(HorizonLabel::Steps(h)),
            Raw::S(s) if s == "avg" => Ok(HorizonLabel::Avg),
            Raw::S(s) => s
                .parse()
                .map(HorizonLabel::Steps)
                .map_err(|_| serde::de::Error::custom(format!("bad horizon {s:?}"))),
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    /// `full`, `no_steering`, `plain`, or an interval label such as `[1-2]`.
    pub mode: String,
    pub horizon: HorizonLabel,
    /// Missing (`null` in JSON) when the cell failed.
    #[serde(with = "nan_as_null")]
    pub mse: f64,
    #[serde(with = "nan_as_null")]
    pub mae: f64,
    pub n_windows: usize,
    /// `None` for seed-averaged rows.
    pub seed: Option<u64>,
    #[serde(default)]
    pub trainable_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricRow {
    pub fn new(dataset: &str, mode: &str, horizon: usize, seed: Option<u64>, m: Metrics) -> Self {
        MetricRow {
            dataset: dataset.to_string(),
            mode: mode.to_string(),
            horizon: HorizonLabel::Steps(horizon),
            mse: m.mse,
            mae: m.mae,
            n_windows: m.n_windows,
            seed,
            trainable_params: None,
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Unweighted mean of `rows`, which must share dataset, mode and seed.
pub fn average_rows(rows: &[MetricRow], horizon: HorizonLabel) -> Result<MetricRow> {
    let first = rows.first().ok_or(Error::Empty("rows to average"))?;
    for r in rows {
        if r.dataset != first.dataset || r.mode != first.mode || r.seed != first.seed {
            return Err(Error::Config(format!(
                "cannot average rows of {}/{}/{:?} with {}/{}/{:?}",
                first.dataset, first.mode, first.seed, r.dataset, r.mode, r.seed
            )));
        }
        if let Some(e) = &r.error {
            return Err(Error::Config(format!("cannot average a failed row: {e}")));
        }
    }
    let n = rows.len() as f64;
    Ok(MetricRow {
        horizon,
        mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        n_windows: rows.iter().map(|r| r.n_windows).sum(),
        error: None,
        ..first.clone()
    })
}

/// The `avg` row over exactly the horizons 96, 192, 336 and 720.
pub fn average_over_horizons(rows: &[MetricRow]) -> Result<MetricRow> {
    for h in STANDARD_HORIZONS {
        let n = rows.iter().filter(|r| r.horizon == HorizonLabel::Steps(h)).count();
        if n == 0 {
            return Err(Error::MissingHorizon(h));
        }
        if n > 1 {
            return Err(Error::Config(format!("horizon {h} appears {n} times")));
        }
    }
    if rows.len() != STANDARD_HORIZONS.len() {
        return Err(Error::Config(format!(
            "expected exactly the horizons {STANDARD_HORIZONS:?}, got {} rows",
            rows.len()
        )));
    }
    average_rows(rows, HorizonLabel::Avg)
}

/// A grid entry: a mode, optionally with a steering interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationCell {
    pub mode: Mode,
    pub interval: Option<(usize, usize)>,
}

impl AblationCell {
    pub fn mode(mode: Mode) -> Self {
        AblationCell { mode, interval: None }
    }

    pub fn interval(x: usize, y: usize) -> Self {
        AblationCell {
            mode: Mode::Full,
            interval: Some((x, y)),
        }
    }

    pub fn label(&self) -> String {
        match self.interval {
            Some((x, y)) => format!("[{x}-{y}]"),
            None => self.mode.as_str().to_string(),
        }
    }
}

/// Everything [`run_ablation`] needs. The frozen components are shared by
/// every cell; each (cell, horizon, seed) gets a freshly seeded fusion module.
pub struct AblationSpec<'a, T: Real> {
    pub series: &'a RawSeries,
    pub scheme: SplitScheme,
    pub backbone: &'a BackboneWeights<T>,
    pub tsfm: &'a TsfmWeights<T>,
    pub cells: Vec<AblationCell>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; mode, interval, horizon and seed are set per cell.
    pub fusion: FusionConfig,
    /// Template; horizon and seed are set per cell.
    pub train: TrainConfig,
    pub train_stride: usize,
    /// Stride of validation and test windows.
    pub eval_stride: usize,
}

struct SplitWindows<T> {
    train: Vec<ForecastWindow<T>>,
    val: Vec<ForecastWindow<T>>,
    test: Vec<ForecastWindow<T>>,
}

fn cell_windows<T: Real>(spec: &AblationSpec<'_, T>, horizon: usize) -> Result<SplitWindows<T>> {
    let split = make_splits(spec.series.len(), spec.scheme, spec.train.few_shot_ratio)?;
    let t = spec.fusion.lookback;
    split.check_capacity(t, horizon)?;
    Ok(SplitWindows {
        train: make_windows(spec.series, split.few_shot.clone(), t, horizon, spec.train_stride)?,
        val: make_eval_windows(spec.series, split.val.clone(), t, horizon, spec.eval_stride)?,
        test: make_eval_windows(spec.series, split.test.clone(), t, horizon, spec.eval_stride)?,
    })
}

/// Prepared train/validation items for one cell; reusable across seeds
/// when nothing seed-dependent enters the preparation.
struct Prepared<T> {
    train: Vec<TrainItem<T>>,
    val: Vec<TrainItem<T>>,
    test: Vec<TrainItem<T>>,
}

fn run_cell<T: Real>(
    spec: &AblationSpec<'_, T>,
    cell: AblationCell,
    horizon: usize,
    seed: u64,
    windows: &SplitWindows<T>,
    cache: &mut Option<Prepared<T>>,
) -> Result<(Metrics, usize)> {
    let fusion = FusionConfig {
        mode: cell.mode,
        interval: cell.interval,
        horizon,
        init_seed: seed,
        dataset: spec.series.name.clone(),
        ..spec.fusion.clone()
    };
    let train_cfg = TrainConfig {
        horizon,
        seed,
        ..spec.train.clone()
    };
    let mut model = MsefModel::new(spec.backbone.clone(), spec.tsfm.clone(), fusion)?;
    // Plain-mode inputs never touch seeded weights, so they are shared.
    let reuse = cell.mode == Mode::Plain;
    let fresh;
    let prepared = match cache {
        Some(p) if reuse => &*p,
        _ => {
            let p = Prepared {
                train: prepare_items(&model, &windows.train)?,
                val: prepare_items(&model, &windows.val)?,
                test: prepare_items(&model, &windows.test)?,
            };
            if reuse {
                &*cache.insert(p)
            } else {
                fresh = p;
                &fresh
            }
        }
    };
    train_on_items(&mut model, &prepared.train, &prepared.val, &train_cfg)?;
    let metrics = evaluate_items(&model, &prepared.test, windows.test.len())?;
    Ok((metrics, model.trainable_count()))
}

/// Trains and tests every (cell, horizon, seed) combination.
///
/// Failing cells are recorded with their error and do not stop the run.
pub fn run_ablation<T: Real>(spec: &AblationSpec<'_, T>) -> Result<AblationReport> {
    if spec.cells.is_empty() || spec.horizons.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let dataset = spec.series.name.clone();
    let mut rows = Vec::new();
    for &cell in &spec.cells {
        for &h in &spec.horizons {
            let windows = cell_windows(spec, h);
            let mut cache = None;
            for &seed in &spec.seeds {
                let result = windows
                    .as_ref()
                    .map_err(|e| Error::Config(e.to_string()))
                    .and_then(|w| run_cell(spec, cell, h, seed, w, &mut cache));
                let row = match result {
                    Ok((m, params)) => MetricRow {
                        trainable_params: Some(params),
                        ..MetricRow::new(&dataset, &cell.label(), h, Some(seed), m)
                    },
                    Err(e) => MetricRow {
                        dataset: dataset.clone(),
                        mode: cell.label(),
                        horizon: HorizonLabel::Steps(h),
                        mse: f64::NAN,
                        mae: f64::NAN,
                        n_windows: 0,
                        seed: Some(seed),
                        trainable_params: None,
                        error: Some(e.to_string()),
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(AblationReport::from_rows(rows))
}

/// Seed-mean rows per (mode, horizon), plus `avg` rows where all four
/// standard horizons are present.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut keys: Vec<(String, String, HorizonLabel)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let k = (r.dataset.clone(), r.mode.clone(), r.horizon);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (dataset, mode, horizon) in &keys {
        let group: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.seed.is_some() && &r.dataset == dataset && &r.mode == mode && r.horizon == *horizon)
            .collect();
        let ok: Vec<MetricRow> = group
            .iter()
            .filter(|r| !r.failed())
            .map(|r| MetricRow { seed: None, ..(*r).clone() })
            .collect();
        let row = if ok.is_empty() {
            MetricRow {
                seed: None,
                error: Some(format!("all {} seeds failed", group.len())),
                ..group[0].clone()
            }
        } else {
            let mut mean = average_rows(&ok, *horizon).expect("homogeneous group");
            mean.n_windows = ok[0].n_windows;
            mean
        };
        out.push(row);
    }
    let modes: BTreeSet<(String, String)> = out.iter().map(|r| (r.dataset.clone(), r.mode.clone())).collect();
    let mut avgs = Vec::new();
    for (dataset, mode) in modes {
        let per_h: Vec<MetricRow> = out
            .iter()
            .filter(|r| r.dataset == dataset && r.mode == mode)
            .cloned()
            .collect();
        if let Ok(avg) = average_over_horizons(&per_h) {
            avgs.push(avg);
        }
    }
    out.extend(avgs);
    out
}
