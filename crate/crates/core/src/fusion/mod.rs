//! Multi-layer fusion of time-series representations into a frozen decoder.
//!
//! For every channel of a window the pipeline is: instance-normalize, encode
//! with the frozen TSFM, project the patch representations into the decoder
//! width, and prepend them (plus this layer's steering rows, inside the
//! steering interval) to the decoder sequence at every layer. The head reads
//! the final states at the representation positions and maps them to the
//! horizon, after which the forecast is denormalized.
//!
//! Only the steering bank, the head and, optionally, the projection are
//! trainable; see [`trainable_parameters`].

mod norm;
mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use norm::{denormalize, normalize_instance, InstanceStats, NORM_EPS};
pub use text::{plain_tokens, prompt_text, prompt_tokens, serialize_values, MAX_PROMPT_TOKENS};

use crate::backbone::BackboneWeights;
use crate::block::INIT_STD;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{matmul, GradTape, Real, Tensor, Var};
use crate::tsfm::{PatchRepresentation, TsfmWeights};

pub const COMPONENT: &str = "FUSION";
pub const PROJECTION_COMPONENT: &str = "PROJECTION";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Representations at every layer, steering rows inside the interval.
    Full,
    /// Representations only.
    NoSteering,
    /// No prefix; the window is serialized as text.
    Plain,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoSteering, Mode::Plain];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_steering" => Ok(Mode::NoSteering),
            "plain" => Ok(Mode::Plain),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, no_steering or plain)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoSteering => "no_steering",
            Mode::Plain => "plain",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses `"x-y"` into a 1-based inclusive layer interval.
pub fn parse_interval(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("invalid layer interval {s:?} (expected x-y with 1 <= x <= y)"));
    let (a, b) = s.trim().split_once('-').ok_or_else(bad)?;
    let x: usize = a.trim().parse().map_err(|_| bad())?;
    let y: usize = b.trim().parse().map_err(|_| bad())?;
    if x == 0 || x > y {
        return Err(bad());
    }
    Ok((x, y))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: Mode,
    /// Layers receiving steering rows, 1-based inclusive; `None` means all.
    pub interval: Option<(usize, usize)>,
    /// Steering rows per layer (`m`).
    pub steering_len: usize,
    pub horizon: usize,
    /// Input window length `T`.
    pub lookback: usize,
    /// Name used in the text prompt.
    pub dataset: String,
    /// Trailing steps serialized in plain mode (`K`).
    pub plain_steps: usize,
    pub train_projection: bool,
    pub init_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: Mode::Full,
            interval: None,
            steering_len: 4,
            horizon: 96,
            lookback: 512,
            dataset: "series".to_string(),
            plain_steps: 128,
            train_projection: false,
            init_seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn resolved_interval(&self, n_layers: usize) -> (usize, usize) {
        self.interval.unwrap_or((1, n_layers))
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let (x, y) = self.resolved_interval(n_layers);
        if x == 0 || x > y || y > n_layers {
            return Err(Error::Config(format!(
                "steering interval [{x}-{y}] must satisfy 1 <= x <= y <= {n_layers}"
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.lookback < 2 {
            return Err(Error::Config("lookback must be at least 2".into()));
        }
        if self.mode == Mode::Plain && (self.plain_steps == 0 || self.plain_steps > self.lookback) {
            return Err(Error::Config(format!(
                "plain_steps must lie in 1..={}, got {}",
                self.lookback, self.plain_steps
            )));
        }
        Ok(())
    }

    /// Whether layer `l` (1-based) receives steering rows.
    pub fn steers(&self, l: usize, n_layers: usize) -> bool {
        let (x, y) = self.resolved_interval(n_layers);
        self.mode == Mode::Full && self.steering_len > 0 && (x..=y).contains(&l)
    }
}

/// One trainable tensor of the fusion module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Steering rows of layer `l` (1-based).
    Steering(usize),
    Projection,
    HeadWeight,
    HeadBias,
}

/// Exactly the tensors that training may change.
pub fn trainable_parameters(cfg: &FusionConfig, n_layers: usize) -> Vec<ParamId> {
    let mut out = Vec::new();
    if cfg.mode == Mode::Full {
        let (x, y) = cfg.resolved_interval(n_layers);
        out.extend((x..=y).map(ParamId::Steering));
    }
    if cfg.train_projection && cfg.mode != Mode::Plain {
        out.push(ParamId::Projection);
    }
    out.extend([ParamId::HeadWeight, ParamId::HeadBias]);
    out
}

/// Per-layer steering rows, one `m × d_model` entry per decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringBank<T> {
    pub entries: Vec<Tensor<T>>,
}

impl<T: Real> SteeringBank<T> {
    /// Entry for layer `l` (1-based).
    pub fn get(&self, l: usize) -> &Tensor<T> {
        &self.entries[l - 1]
    }

    pub fn get_mut(&mut self, l: usize) -> &mut Tensor<T> {
        &mut self.entries[l - 1]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `d_ts → d_model` adapter applied to every patch representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityProjection<T> {
    pub weight: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> ModalityProjection<T> {
    /// Standalone container, used to check the projection stays frozen.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::for_real::<T>(PROJECTION_COMPONENT);
        ck.set_config("trainable", self.trainable);
        ck.push("proj.w", &self.weight);
        ck
    }
}

/// Linear map from the flattened `p·d_model` states to the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Everything the fusion module owns.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    pub config: FusionConfig,
    pub n_patches: usize,
    pub bank: SteeringBank<T>,
    pub projection: ModalityProjection<T>,
    pub head: ForecastHead<T>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Real> FusionWeights<T> {
    /// Seeded initialization. Projection, head and steering bank draw from
    /// separate streams, so e.g. `m` does not perturb the head.
    pub fn init(
        config: &FusionConfig,
        n_layers: usize,
        d_model: usize,
        d_ts: usize,
        n_patches: usize,
    ) -> Result<Self> {
        config.validate(n_layers)?;
        let seed = config.init_seed;
        let weight = Tensor::randn([d_ts, d_model], 1.0 / (d_ts as f64).sqrt(), &mut stream_rng(seed, 1));
        let mut head_rng = stream_rng(seed, 2);
        let head = ForecastHead {
            weight: Tensor::randn([n_patches * d_model, config.horizon], INIT_STD, &mut head_rng),
            bias: Tensor::zeros([config.horizon]),
        };
        let mut bank_rng = stream_rng(seed, 3);
        let entries = (0..n_layers)
            .map(|_| Tensor::randn([config.steering_len, d_model], INIT_STD, &mut bank_rng))
            .collect();
        let mut w = FusionWeights {
            config: config.clone(),
            n_patches,
            bank: SteeringBank { entries },
            projection: ModalityProjection {
                weight,
                trainable: config.train_projection,
            },
            head,
        };
        w.sync_requires_grad(n_layers);
        Ok(w)
    }

    fn sync_requires_grad(&mut self, n_layers: usize) {
        let trainable = trainable_parameters(&self.config, n_layers);
        for l in 1..=self.bank.len() {
            let flag = trainable.contains(&ParamId::Steering(l));
            self.bank.get_mut(l).set_requires_grad(flag);
        }
        self.projection
            .weight
            .set_requires_grad(trainable.contains(&ParamId::Projection));
        self.head.weight.set_requires_grad(true);
        self.head.bias.set_requires_grad(true);
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        match id {
            ParamId::Steering(l) => self.bank.get(l),
            ParamId::Projection => &self.projection.weight,
            ParamId::HeadWeight => &self.head.weight,
            ParamId::HeadBias => &self.head.bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        match id {
            ParamId::Steering(l) => self.bank.get_mut(l),
            ParamId::Projection => &mut self.projection.weight,
            ParamId::HeadWeight => &mut self.head.weight,
            ParamId::HeadBias => &mut self.head.bias,
        }
    }

    /// Mutable handles in the order of `ids`.
    pub fn params_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor<T>> {
        let mut all: Vec<(ParamId, &mut Tensor<T>)> = self
            .bank
            .entries
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId::Steering(i + 1), t))
            .collect();
        all.push((ParamId::Projection, &mut self.projection.weight));
        all.push((ParamId::HeadWeight, &mut self.head.weight));
        all.push((ParamId::HeadBias, &mut self.head.bias));
        let mut slots: Vec<Option<(ParamId, &mut Tensor<T>)>> = all.into_iter().map(Some).collect();
        ids.iter()
            .map(|id| {
                let slot = slots
                    .iter_mut()
                    .find(|s| matches!(s, Some((k, _)) if k == id))
                    .unwrap_or_else(|| panic!("unknown or repeated parameter {id:?}"));
                slot.take().expect("matched above").1
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .bank
            .entries
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("steering.{}", i + 1), t))
            .collect();
        out.push(("proj.w".into(), &self.projection.weight));
        out.push(("head.w".into(), &self.head.weight));
        out.push(("head.b".into(), &self.head.bias));
        out
    }
}

/// Prefix rows for layer `l` (1-based): `[E·W_proj ; S_l]`, `[E·W_proj]` or nothing.
pub fn assemble_prefix<T: Real>(
    l: usize,
    reps: &PatchRepresentation<T>,
    bank: &SteeringBank<T>,
    proj: &ModalityProjection<T>,
    cfg: &FusionConfig,
) -> Result<Tensor<T>> {
    let n_layers = bank.len();
    if l == 0 || l > n_layers {
        return Err(Error::Config(format!("layer {l} outside 1..={n_layers}")));
    }
    let d = proj.weight.cols();
    if cfg.mode == Mode::Plain {
        return Ok(Tensor::zeros([0, d]));
    }
    let ts = matmul(&reps.reps, &proj.weight)?;
    if !cfg.steers(l, n_layers) {
        return Ok(ts);
    }
    let mut data = ts.into_data();
    data.extend_from_slice(bank.get(l).data());
    let rows = data.len() / d;
    Tensor::new([rows, d], data)
}

/// Per-channel model input with every frozen computation done up front.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput<T> {
    pub stats: InstanceStats,
    pub channel: usize,
    pub body: PreparedBody<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedBody<T> {
    Inputs {
        /// `p × d_model` once projected, or `p × d_ts` when the projection trains.
        ts: Option<Tensor<T>>,
        ts_projected: bool,
        /// Embedded token sequence.
        text: Tensor<T>,
    },
    /// Flattened `1 × p·d_model` head input; valid only while nothing
    /// upstream of the head trains.
    Features(Tensor<T>),
}

/// Output of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Normalized forecast, `1 × H`.
    pub pred: Var,
    /// Trainable leaves as bound on the tape.
    pub params: Vec<(ParamId, Var)>,
}

/// Frozen backbone and encoder plus the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct MsefModel<T> {
    pub backbone: BackboneWeights<T>,
    pub tsfm: TsfmWeights<T>,
    pub fusion: FusionWeights<T>,
}

impl<T: Real> MsefModel<T> {
    pub fn new(backbone: BackboneWeights<T>, tsfm: TsfmWeights<T>, config: FusionConfig) -> Result<Self> {
        let n_patches = tsfm.config.n_patches(config.lookback);
        let fusion = FusionWeights::init(
            &config,
            backbone.config.n_layers,
            backbone.config.d_model,
            tsfm.config.d_ts,
            n_patches,
        )?;
        let model = MsefModel {
            backbone,
            tsfm,
            fusion,
        };
        model.check_sizes()?;
        Ok(model)
    }

    fn check_sizes(&self) -> Result<()> {
        let cfg = &self.fusion.config;
        let p = self.n_patches();
        if p > self.tsfm.config.max_patches {
            return Err(Error::Config(format!(
                "lookback {} gives {p} patches, more than the encoder's {}",
                cfg.lookback, self.tsfm.config.max_patches
            )));
        }
        let seq = match cfg.mode {
            Mode::Plain => {
                let prompt = prompt_tokens(&cfg.dataset, cfg.lookback, cfg.horizon, 0).len();
                // |z| <= sqrt(T - 1) < 100, so a value plus its comma is at most 7 bytes.
                prompt + 1 + cfg.plain_steps * 7
            }
            _ => self.prefix_len() + MAX_PROMPT_TOKENS,
        };
        if seq > self.backbone.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.backbone.config.max_seq,
            });
        }
        Ok(())
    }

    pub fn config(&self) -> &FusionConfig {
        &self.fusion.config
    }

    pub fn n_layers(&self) -> usize {
        self.backbone.config.n_layers
    }

    pub fn n_patches(&self) -> usize {
        self.fusion.n_patches
    }

    /// Longest prefix over all layers; also the position offset of the text.
    pub fn prefix_len(&self) -> usize {
        let cfg = self.config();
        match cfg.mode {
            Mode::Plain => 0,
            Mode::NoSteering => self.n_patches(),
            Mode::Full => self.n_patches() + cfg.steering_len,
        }
    }

    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        trainable_parameters(self.config(), self.n_layers())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters()
            .into_iter()
            .map(|id| self.fusion.param(id).numel())
            .sum()
    }

    /// True when only the head trains, so its input can be computed once.
    pub fn head_only(&self) -> bool {
        let cfg = self.config();
        let steering = cfg.mode == Mode::Full && cfg.steering_len > 0;
        let projection = cfg.train_projection && cfg.mode != Mode::Plain;
        !steering && !projection
    }

    pub fn assemble_prefix(&self, l: usize, reps: &PatchRepresentation<T>) -> Result<Tensor<T>> {
        assemble_prefix(l, reps, &self.fusion.bank, &self.fusion.projection, self.config())
    }

    /// Token ids for `channel`, including serialized values in plain mode.
    pub fn tokens(&self, x_norm: &[T], channel: usize) -> Vec<usize> {
        let cfg = self.config();
        let prompt = prompt_tokens(&cfg.dataset, cfg.lookback, cfg.horizon, channel);
        match cfg.mode {
            Mode::Plain => plain_tokens(&prompt, &x_norm[x_norm.len() - cfg.plain_steps..]),
            _ => prompt,
        }
    }

    /// Normalizes, encodes and embeds one channel window.
    pub fn prepare(&self, x: &[T], channel: usize) -> Result<PreparedInput<T>> {
        let cfg = self.config();
        if x.len() != cfg.lookback {
            return Err(Error::shape("prepare", &[x.len()], &[cfg.lookback]));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input window, channel {channel}")));
        }
        let (x_norm, stats) = normalize_instance(x);
        let ts = match cfg.mode {
            Mode::Plain => None,
            _ => Some(self.tsfm.encode(&x_norm)?.reps),
        };
        let ts_projected = !self.fusion.projection.trainable;
        let ts = match ts {
            Some(e) if ts_projected => Some(matmul(&e, &self.fusion.projection.weight)?),
            other => other,
        };
        let text = self.backbone.embed_text(&self.tokens(&x_norm, channel), self.prefix_len())?;
        Ok(PreparedInput {
            stats,
            channel,
            body: PreparedBody::Inputs {
                ts,
                ts_projected,
                text,
            },
        })
    }

    /// [`MsefModel::prepare`] followed by the frozen part of the graph when
    /// only the head trains.
    pub fn prepare_cached(&self, x: &[T], channel: usize) -> Result<PreparedInput<T>> {
        let mut input = self.prepare(x, channel)?;
        if self.head_only() {
            let mut tape = GradTape::new();
            let (feat, _) = self.features_on_tape(&mut tape, &input)?;
            let feat = tape.tensor(feat);
            input.body = PreparedBody::Features(feat);
        }
        Ok(input)
    }

    /// Records everything up to the head input, `1 × p·d_model`.
    pub fn features_on_tape<'a>(
        &'a self,
        tape: &mut GradTape<'a, T>,
        input: &'a PreparedInput<T>,
    ) -> Result<(Var, Vec<(ParamId, Var)>)> {
        let mut params = Vec::new();
        let (ts, ts_projected, text) = match &input.body {
            PreparedBody::Features(f) => return Ok((tape.leaf(f), params)),
            PreparedBody::Inputs {
                ts,
                ts_projected,
                text,
            } => (ts, *ts_projected, text),
        };
        let cfg = self.config();
        let n_layers = self.n_layers();
        let d = self.backbone.config.d_model;
        let p = self.n_patches();

        let ts_rows = match ts {
            None => None,
            Some(t) if ts_projected => Some(tape.leaf(t)),
            Some(t) => {
                let e = tape.leaf(t);
                let w = tape.leaf(&self.fusion.projection.weight);
                if tape.requires_grad(w) {
                    params.push((ParamId::Projection, w));
                }
                Some(tape.matmul(e, w)?)
            }
        };
        let mut steering = vec![None; n_layers + 1];
        for (l, slot) in steering.iter_mut().enumerate().skip(1) {
            if cfg.steers(l, n_layers) {
                let s = tape.leaf(self.fusion.bank.get(l));
                if tape.requires_grad(s) {
                    params.push((ParamId::Steering(l), s));
                }
                *slot = Some(s);
            }
        }
        let empty = tape.constant(Tensor::zeros([0, d]));
        let text = tape.leaf(text);
        let out = self.backbone.forward_with_injection(tape, text, |tape, l| match (ts_rows, steering[l]) {
            (None, _) => Ok(empty),
            (Some(ts), None) => Ok(ts),
            (Some(ts), Some(s)) => tape.concat_rows(&[ts, s]),
        })?;
        let states = match cfg.mode {
            Mode::Plain => {
                let n = tape.shape(out.sequence)[0];
                if n < p {
                    return Err(Error::InsufficientLength { need: p, have: n });
                }
                tape.slice_rows(out.sequence, n - p, n)?
            }
            _ => tape.slice_rows(out.prefix, 0, p)?,
        };
        Ok((tape.reshape(states, &[1, p * d])?, params))
    }

    /// Full graph for one prepared channel; the prediction is normalized.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut GradTape<'a, T>,
        input: &'a PreparedInput<T>,
    ) -> Result<ForwardPass> {
        let (feat, mut params) = self.features_on_tape(tape, input)?;
        let w = tape.leaf(&self.fusion.head.weight);
        let b = tape.leaf(&self.fusion.head.bias);
        params.push((ParamId::HeadWeight, w));
        params.push((ParamId::HeadBias, b));
        let y = tape.matmul(feat, w)?;
        let pred = tape.add_row(y, b)?;
        tape.check_finite(pred, "forecast")?;
        Ok(ForwardPass { pred, params })
    }

    /// Denormalized forecast for a prepared input.
    pub fn forecast_prepared(&self, input: &PreparedInput<T>) -> Result<Vec<T>> {
        let mut tape = GradTape::new();
        let pass = self.forward_on_tape(&mut tape, input)?;
        Ok(denormalize(tape.value(pass.pred), &input.stats))
    }

    /// Forecast for one univariate window treated as channel `channel`.
    pub fn forecast_channel(&self, x: &[T], channel: usize) -> Result<Vec<T>> {
        self.forecast_prepared(&self.prepare(x, channel)?)
    }

    /// `N × T` window to `N × H` forecast, one channel at a time.
    pub fn forecast(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, t) = match x.shape() {
            [n, t] => (*n, *t),
            s => return Err(Error::shape("forecast", s, &[0, self.config().lookback])),
        };
        if t != self.config().lookback {
            return Err(Error::shape("forecast", x.shape(), &[n, self.config().lookback]));
        }
        let h = self.config().horizon;
        let mut data = Vec::with_capacity(n * h);
        for c in 0..n {
            data.extend(self.forecast_channel(x.row(c), c)?);
        }
        Tensor::new([n, h], data)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = self.config();
        let mut ck = Checkpoint::for_real::<T>(COMPONENT);
        ck.set_config("mode", cfg.mode);
        match cfg.interval {
            Some((x, y)) => ck.set_config("interval", format!("{x}-{y}")),
            None => ck.set_config("interval", "all"),
        }
        ck.set_config("steering_len", cfg.steering_len);
        ck.set_config("horizon", cfg.horizon);
        ck.set_config("lookback", cfg.lookback);
        ck.set_config("dataset", &cfg.dataset);
        ck.set_config("plain_steps", cfg.plain_steps);
        ck.set_config("train_projection", cfg.train_projection);
        ck.set_config("init_seed", cfg.init_seed);
        ck.set_config("n_layers", self.n_layers());
        ck.set_config("d_model", self.backbone.config.d_model);
        ck.set_config("d_ts", self.tsfm.config.d_ts);
        ck.set_config("n_patches", self.n_patches());
        for (name, t) in self.fusion.named_tensors() {
            ck.push(&name, t);
        }
        ck
    }

    /// Rebuilds a model around frozen components from a fusion checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, backbone: BackboneWeights<T>, tsfm: TsfmWeights<T>) -> Result<Self> {
        ck.expect_component(COMPONENT)?;
        let config = fusion_config_from_checkpoint(ck)?;
        for (key, have) in [
            ("n_layers", backbone.config.n_layers),
            ("d_model", backbone.config.d_model),
            ("d_ts", tsfm.config.d_ts),
        ] {
            let want: usize = ck.parse_config(key)?;
            if want != have {
                return Err(Error::Checkpoint(format!(
                    "fusion checkpoint expects {key} = {want}, frozen component has {have}"
                )));
            }
        }
        let mut model = MsefModel::new(backbone, tsfm, config)?;
        let names: Vec<String> = model.fusion.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let loaded: Tensor<T> = ck.tensor(&name)?;
            let slot = match name.as_str() {
                "proj.w" => &mut model.fusion.projection.weight,
                "head.w" => &mut model.fusion.head.weight,
                "head.b" => &mut model.fusion.head.bias,
                s => {
                    let l: usize = s["steering.".len()..].parse().expect("own naming");
                    model.fusion.bank.get_mut(l)
                }
            };
            if loaded.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(loaded.data());
        }
        Ok(model)
    }
}

/// Fusion settings recorded in a checkpoint.
pub fn fusion_config_from_checkpoint(ck: &Checkpoint) -> Result<FusionConfig> {
    Ok(FusionConfig {
        mode: Mode::parse(ck.config_value("mode")?)?,
        interval: match ck.config_value("interval")? {
            "all" => None,
            s => Some(parse_interval(s)?),
        },
        steering_len: ck.parse_config("steering_len")?,
        horizon: ck.parse_config("horizon")?,
        lookback: ck.parse_config("lookback")?,
        dataset: ck.config_value("dataset")?.to_string(),
        plain_steps: ck.parse_config("plain_steps")?,
        train_projection: ck.parse_config("train_projection")?,
        init_seed: ck.parse_config("init_seed")?,
    })
}

/// Forecast in full or no-steering mode (plain mode is dispatched too).
pub fn forecast<T: Real>(model: &MsefModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    model.forecast(x)
}

/// Forecast from serialized values only.
pub fn forecast_plain<T: Real>(model: &MsefModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if model.config().mode != Mode::Plain {
        return Err(Error::Config(format!(
            "forecast_plain needs mode plain, model is {}",
            model.config().mode
        )));
    }
    model.forecast(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::tsfm::{init_tsfm, TsfmConfig};

    fn model(mode: Mode, m: usize, interval: Option<(usize, usize)>) -> MsefModel<f64> {
        let bb = BackboneConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq: 256,
            ..Default::default()
        };
        let ts = TsfmConfig {
            patch_len: 4,
            d_ts: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            max_patches: 8,
            init_seed: 2,
        };
        let cfg = FusionConfig {
            mode,
            interval,
            steering_len: m,
            horizon: 3,
            lookback: 16,
            dataset: "toy".into(),
            plain_steps: 8,
            ..Default::default()
        };
        MsefModel::new(init_backbone(&bb).unwrap(), init_tsfm(&ts).unwrap(), cfg).unwrap()
    }

    fn window(seed: u64) -> Vec<f64> {
        (0..16).map(|t| ((t as f64 + seed as f64) * 0.41).sin() * 2.0 + 0.1 * t as f64).collect()
    }

    #[test]
    fn interval_parsing() {
        assert_eq!(parse_interval("1-4").unwrap(), (1, 4));
        assert_eq!(parse_interval("3-3").unwrap(), (3, 3));
        assert!(parse_interval("2-1").is_err());
        assert!(parse_interval("0-2").is_err());
        assert!(parse_interval("12").is_err());
    }

    #[test]
    fn prefix_rows_follow_the_interval() {
        let m = model(Mode::Full, 2, Some((2, 3)));
        let reps = m.tsfm.encode(&window(0)).unwrap();
        let rows: Vec<usize> = (1..=4).map(|l| m.assemble_prefix(l, &reps).unwrap().rows()).collect();
        assert_eq!(rows, vec![4, 6, 6, 4]);
        let plain = model(Mode::Plain, 2, None);
        assert_eq!(plain.assemble_prefix(1, &reps).unwrap().rows(), 0);
        let ts = m.assemble_prefix(2, &reps).unwrap();
        assert_eq!(&ts.data()[..4 * 8], m.assemble_prefix(1, &reps).unwrap().data());
        assert_eq!(&ts.data()[4 * 8..], m.fusion.bank.get(2).data());
    }

    #[test]
    fn trainable_counts() {
        let full = model(Mode::Full, 2, None);
        assert_eq!(full.trainable_count(), 4 * 2 * 8 + 4 * 8 * 3 + 3);
        let sub = model(Mode::Full, 2, Some((2, 3)));
        assert_eq!(sub.trainable_count(), 2 * 2 * 8 + 4 * 8 * 3 + 3);
        assert_eq!(
            model(Mode::NoSteering, 2, None).trainable_parameters(),
            vec![ParamId::HeadWeight, ParamId::HeadBias]
        );
        assert_eq!(model(Mode::Plain, 2, None).trainable_count(), 4 * 8 * 3 + 3);
    }

    #[test]
    fn zero_steering_matches_no_steering() {
        let a = model(Mode::Full, 0, None);
        let b = model(Mode::NoSteering, 4, None);
        let x = window(3);
        assert_eq!(a.forecast_channel(&x, 0).unwrap(), b.forecast_channel(&x, 0).unwrap());
    }

    #[test]
    fn cached_features_give_identical_forecasts() {
        for mode in [Mode::Plain, Mode::NoSteering] {
            let m = model(mode, 2, None);
            let x = window(1);
            let direct = m.forecast_prepared(&m.prepare(&x, 1).unwrap()).unwrap();
            let cached = m.forecast_prepared(&m.prepare_cached(&x, 1).unwrap()).unwrap();
            assert_eq!(direct, cached);
        }
    }

    #[test]
    fn plain_forecast_is_deterministic() {
        let m = model(Mode::Plain, 2, None);
        let x = Tensor::new([2, 16], [window(0), window(5)].concat()).unwrap();
        let a = forecast_plain(&m, &x).unwrap();
        assert_eq!(a, forecast_plain(&m, &x).unwrap());
        assert_eq!(a.shape(), &[2, 3]);
        assert!(forecast_plain(&model(Mode::Full, 2, None), &x).is_err());
    }

    #[test]
    fn rejects_wrong_window_length_and_nan() {
        let m = model(Mode::Full, 2, None);
        assert!(m.forecast_channel(&[0.0; 15], 0).is_err());
        let mut x = window(0);
        x[3] = f64::NAN;
        assert!(matches!(m.forecast_channel(&x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(Mode::Full, 2, Some((1, 2)));
        let back = MsefModel::from_checkpoint(&m.to_checkpoint(), m.backbone.clone(), m.tsfm.clone()).unwrap();
        assert_eq!(back, m);
    }
}
