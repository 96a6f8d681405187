//! Few-shot optimization of the fusion parameters.
//!
//! Each (window, channel) pair is one training item. An epoch shuffles the
//! items, takes Adam steps on mini-batch mean-squared error in the data's
//! original scale, then scores the whole validation set. Training stops
//! once validation loss has not improved for `patience` epochs, and the
//! best-scoring parameters are restored.

mod adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};

use crate::checkpoint::Checkpoint;
use crate::data::ForecastWindow;
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::fusion::{MsefModel, ParamId, PreparedInput};
use crate::numerics::{GradTape, Real, Tensor, Var};

/// Mean squared error recorded on `tape`; differentiable in `pred`.
pub fn mse_loss<T: Real>(tape: &mut GradTape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    tape.mse_loss(pred, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub few_shot_ratio: f64,
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            few_shot_ratio: 0.10,
            horizon: 96,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.few_shot_ratio > 0.0 && self.few_shot_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "few_shot_ratio must lie in (0, 1], got {}",
                self.few_shot_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's validation loss. Returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Losses of the initialization, before any update ("epoch 0").
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub trainable_params: usize,
    pub n_train_items: usize,
    pub n_val_items: usize,
    /// Filled in by callers that score the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Metrics>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Fusion checkpoint holding the best-validation parameters.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// A prepared channel window with its raw-scale target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<T> {
    pub input: PreparedInput<T>,
    pub target: Tensor<T>,
}

/// One item per (window, channel), with frozen work done once.
pub fn prepare_items<T: Real>(model: &MsefModel<T>, windows: &[ForecastWindow<T>]) -> Result<Vec<TrainItem<T>>> {
    let jobs: Vec<(usize, usize)> = windows
        .iter()
        .enumerate()
        .flat_map(|(w, win)| (0..win.x.rows()).map(move |c| (w, c)))
        .collect();
    jobs.par_iter()
        .map(|&(w, c)| {
            let win = &windows[w];
            Ok(TrainItem {
                input: model.prepare_cached(win.x.row(c), c)?,
                target: Tensor::new([1, win.y.cols()], win.y.row(c).to_vec())?,
            })
        })
        .collect()
}

/// Raw-scale loss of one item and, when `with_grads`, its parameter gradients.
fn item_loss<T: Real>(
    model: &MsefModel<T>,
    item: &TrainItem<T>,
    with_grads: bool,
) -> Result<(f64, Vec<(ParamId, Vec<T>)>)> {
    let mut tape = GradTape::new();
    let pass = model.forward_on_tape(&mut tape, &item.input)?;
    let scaled = tape.scale(pass.pred, T::lit(item.input.stats.scale()))?;
    let pred = tape.shift(scaled, T::lit(item.input.stats.mu))?;
    let target = tape.leaf(&item.target);
    let loss = tape.mse_loss(pred, target)?;
    let value = tape.value(loss)[0].as_f64();
    if !with_grads || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .filter_map(|&(id, v)| tape.grad(v).map(|g| (id, g.to_vec())))
        .collect();
    Ok((value, grads))
}

/// Mean per-element squared error over all items at the current parameters.
pub fn dataset_loss<T: Real>(model: &MsefModel<T>, items: &[TrainItem<T>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("item set"));
    }
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| item_loss(model, it, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

/// Loss of one mini-batch followed by a single Adam step on it.
pub fn batch_step<T: Real>(
    model: &mut MsefModel<T>,
    batch: &[&TrainItem<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<f64> {
    let ids = model.trainable_parameters();
    let results: Vec<(f64, Vec<(ParamId, Vec<T>)>)> = {
        let m = &*model;
        batch
            .par_iter()
            .map(|it| item_loss(m, it, true))
            .collect::<Result<_>>()?
    };
    let mut sums: Vec<Vec<T>> = ids
        .iter()
        .map(|&id| vec![T::zero(); model.fusion.param(id).numel()])
        .collect();
    let mut loss = 0.0;
    for (l, grads) in &results {
        if !l.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        loss += l;
        for (id, g) in grads {
            let k = ids.iter().position(|x| x == id).expect("trainable id");
            for (a, &b) in sums[k].iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    let mut params = model.fusion.params_mut(&ids);
    for (p, g) in params.iter_mut().zip(&sums) {
        p.clear_grad();
        let g: Vec<T> = g.iter().map(|&v| v * inv).collect();
        p.accumulate_grad(&g)?;
    }
    adam_step(&mut params, state, lr)?;
    for p in params.iter_mut() {
        p.clear_grad();
    }
    Ok(loss / batch.len() as f64)
}

/// Trains on windows taken from the few-shot range and validates on `val`.
pub fn train<T: Real>(
    model: &mut MsefModel<T>,
    train_windows: &[ForecastWindow<T>],
    val_windows: &[ForecastWindow<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_windows.is_empty() {
        return Err(Error::Empty("few-shot training windows"));
    }
    if val_windows.is_empty() {
        return Err(Error::Empty("validation windows"));
    }
    let train_items = prepare_items(model, train_windows)?;
    let val_items = prepare_items(model, val_windows)?;
    train_on_items(model, &train_items, &val_items, cfg)
}

/// [`train`] over already prepared items.
pub fn train_on_items<T: Real>(
    model: &mut MsefModel<T>,
    train_items: &[TrainItem<T>],
    val_items: &[TrainItem<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.horizon != model.config().horizon {
        return Err(Error::Config(format!(
            "training horizon {} differs from the model's {}",
            cfg.horizon,
            model.config().horizon
        )));
    }
    if train_items.is_empty() {
        return Err(Error::Empty("few-shot training windows"));
    }
    if val_items.is_empty() {
        return Err(Error::Empty("validation windows"));
    }
    let ids = model.trainable_parameters();
    let mut state = {
        let params: Vec<&Tensor<T>> = ids.iter().map(|&id| model.fusion.param(id)).collect();
        AdamState::new(&params)
    };
    let initial_train_loss = dataset_loss(model, train_items)?;
    let initial_val_loss = dataset_loss(model, val_items)?;
    if !initial_train_loss.is_finite() || !initial_val_loss.is_finite() {
        return Err(Error::NonFinite("loss at initialization".into()));
    }

    let snapshot = |m: &MsefModel<T>| -> Vec<Vec<T>> {
        ids.iter().map(|&id| m.fusion.param(id).data().to_vec()).collect()
    };
    let mut best_params = snapshot(model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem<T>> = chunk.iter().map(|&i| &train_items[i]).collect();
            let loss = batch_step(model, &batch, &mut state, cfg.lr).map_err(|e| match e {
                Error::NonFinite(_) => {
                    Error::NonFinite(format!("training loss at epoch {epoch}, batch {}", b + 1))
                }
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_items.len() as f64;
        let val_loss = dataset_loss(model, val_items)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if stopper.observe(epoch, val_loss) {
            best_params = snapshot(model);
        }
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    for (&id, values) in ids.iter().zip(&best_params) {
        model.fusion.param_mut(id).data_mut().copy_from_slice(values);
    }
    let history = TrainHistory {
        initial_train_loss,
        initial_val_loss,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        epochs,
        stop_reason,
        trainable_params: model.trainable_count(),
        n_train_items: train_items.len(),
        n_val_items: val_items.len(),
        test: None,
    };
    Ok(TrainOutcome {
        checkpoint: model.to_checkpoint(),
        history,
    })
}
