//! Frozen patch-based time-series encoder.
//!
//! A window is cut into non-overlapping patches, each patch is linearly
//! embedded and given a learned position, and a stack of bidirectional
//! transformer blocks produces one representation row per patch.
//! [`pretrain_masked`] optionally fits the encoder by masked-patch
//! reconstruction before it is frozen for downstream use.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, dense_mask, BlockVars, BlockWeights, INIT_STD, LN_EPS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::normalize_instance;
use crate::numerics::{GradTape, Real, Tensor, Var};
use crate::training::{adam_step, AdamState};

pub const COMPONENT: &str = "TSFM";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsfmConfig {
    pub patch_len: usize,
    pub d_ts: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Size of the learned patch-position table.
    pub max_patches: usize,
    pub init_seed: u64,
}

impl Default for TsfmConfig {
    fn default() -> Self {
        TsfmConfig {
            patch_len: 8,
            d_ts: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_patches: 64,
            init_seed: 1,
        }
    }
}

impl TsfmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("patch_len", self.patch_len),
            ("d_ts", self.d_ts),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_patches", self.max_patches),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("tsfm {name} must be positive")));
            }
        }
        if self.d_ts % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "tsfm d_ts {} is not divisible by n_heads {}",
                self.d_ts, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of patches produced for a window of `len` steps.
    pub fn n_patches(&self, len: usize) -> usize {
        len.div_ceil(self.patch_len)
    }
}

/// Per-patch representations of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRepresentation<T> {
    /// `p × d_ts`.
    pub reps: Tensor<T>,
    pub source_window_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsfmWeights<T> {
    pub config: TsfmConfig,
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub position: Tensor<T>,
    pub layers: Vec<BlockWeights<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

/// Splits `x` into `⌈T/P⌉` contiguous patches of length `P`.
///
/// When `T` is not a multiple of `P` the series is left-padded by repeating
/// its first value, keeping the most recent steps patch-aligned.
pub fn patchify<T: Real>(x: &[T], patch_len: usize) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Empty("series in patchify"));
    }
    if patch_len == 0 {
        return Err(Error::Config("patch_len must be positive".into()));
    }
    let pad = (patch_len - x.len() % patch_len) % patch_len;
    let mut data = vec![x[0]; pad];
    data.extend_from_slice(x);
    let p = data.len() / patch_len;
    Tensor::new([p, patch_len], data)
}

pub fn init_tsfm<T: Real>(config: &TsfmConfig) -> Result<TsfmWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let d = config.d_ts;
    let patch_weight = Tensor::randn([config.patch_len, d], INIT_STD, &mut rng);
    let patch_bias = Tensor::randn([d], INIT_STD, &mut rng);
    let position = Tensor::randn([config.max_patches, d], INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| BlockWeights::init(d, config.d_ff, &mut rng))
        .collect();
    Ok(TsfmWeights {
        config: config.clone(),
        patch_weight,
        patch_bias,
        position,
        layers,
        final_gamma: Tensor::full([d], T::one()),
        final_beta: Tensor::zeros([d]),
    })
}

impl<T: Real> TsfmWeights<T> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_weight),
            ("patch.b".to_string(), &self.patch_bias),
            ("pos".to_string(), &self.position),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("enc{l}")));
        }
        out.push(("final_ln.gamma".to_string(), &self.final_gamma));
        out.push(("final_ln.beta".to_string(), &self.final_beta));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.position];
        for layer in &mut self.layers {
            out.extend(layer.named_mut("").into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Encoder graph over an already-patched `p × P` input.
    fn encode_patches<'a>(&'a self, tape: &mut GradTape<'a, T>, patches: Var) -> Result<(Var, Vec<Var>)> {
        let p = tape.shape(patches)[0];
        if p > self.config.max_patches {
            return Err(Error::Config(format!(
                "{p} patches exceed the encoder's position table of {}",
                self.config.max_patches
            )));
        }
        let mut leaves = Vec::new();
        let w = tape.leaf(&self.patch_weight);
        let b = tape.leaf(&self.patch_bias);
        let pos = tape.leaf(&self.position);
        leaves.extend([w, b, pos]);
        let h = tape.matmul(patches, w)?;
        let h = tape.add_row(h, b)?;
        let pos_rows = tape.slice_rows(pos, 0, p)?;
        let mut h = tape.add(h, pos_rows)?;
        let mask = dense_mask(p);
        for layer in &self.layers {
            let vars = BlockVars::bind(tape, layer);
            leaves.extend(vars.vars());
            h = block_forward(tape, h, &vars, self.config.n_heads, &mask)?;
        }
        let g = tape.leaf(&self.final_gamma);
        let bt = tape.leaf(&self.final_beta);
        leaves.extend([g, bt]);
        let out = tape.layer_norm(h, g, bt, T::lit(LN_EPS))?;
        Ok((out, leaves))
    }

    /// Records the encoder on `tape` for an instance-normalized window.
    pub fn encode_on_tape<'a>(&'a self, tape: &mut GradTape<'a, T>, x_norm: &[T]) -> Result<Var> {
        if x_norm.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tsfm input".into()));
        }
        let patches = patchify(x_norm, self.config.patch_len)?;
        let pv = tape.constant(patches);
        Ok(self.encode_patches(tape, pv)?.0)
    }

    /// Frozen per-patch representation of an instance-normalized window.
    pub fn encode(&self, x_norm: &[T]) -> Result<PatchRepresentation<T>> {
        let mut tape = GradTape::new();
        let out = self.encode_on_tape(&mut tape, x_norm)?;
        Ok(PatchRepresentation {
            reps: tape.tensor(out),
            source_window_id: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::for_real::<T>(COMPONENT);
        let c = &self.config;
        ck.set_config("patch_len", c.patch_len);
        ck.set_config("d_ts", c.d_ts);
        ck.set_config("n_layers", c.n_layers);
        ck.set_config("n_heads", c.n_heads);
        ck.set_config("d_ff", c.d_ff);
        ck.set_config("max_patches", c.max_patches);
        ck.set_config("init_seed", c.init_seed);
        for (name, t) in self.named_tensors() {
            ck.push(&name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(COMPONENT)?;
        let config = TsfmConfig {
            patch_len: ck.parse_config("patch_len")?,
            d_ts: ck.parse_config("d_ts")?,
            n_layers: ck.parse_config("n_layers")?,
            n_heads: ck.parse_config("n_heads")?,
            d_ff: ck.parse_config("d_ff")?,
            max_patches: ck.parse_config("max_patches")?,
            init_seed: ck.parse_config("init_seed")?,
        };
        let mut w = init_tsfm::<T>(&config)?;
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(w.tensors_mut()) {
            *t = ck.tensor(name)?;
        }
        Ok(w)
    }
}

/// Settings for masked-patch reconstruction pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            mask_ratio: 0.3,
            epochs: 10,
            seed: 0,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

/// Linear patch decoder used only during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDecoder<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    /// Frozen encoder.
    pub weights: TsfmWeights<T>,
    pub decoder: PatchDecoder<T>,
    /// Masked-reconstruction MSE under a fixed seeded mask after each epoch;
    /// entry 0 is measured before any update.
    pub epoch_losses: Vec<f64>,
}

fn mask_for(n_patches: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = ((ratio * n_patches as f64).round() as usize).clamp(1, n_patches);
    let mut idx: Vec<usize> = (0..n_patches).collect();
    idx.shuffle(rng);
    let mut masked = vec![false; n_patches];
    for &i in &idx[..k] {
        masked[i] = true;
    }
    masked
}

/// Masked-reconstruction loss of one window; records everything on `tape`.
fn masked_loss<'a, T: Real>(
    tape: &mut GradTape<'a, T>,
    enc: &'a TsfmWeights<T>,
    dec: &'a PatchDecoder<T>,
    series: &[T],
    masked: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let (norm, _) = normalize_instance(series);
    let patches = patchify(&norm, enc.config.patch_len)?;
    let p_len = enc.config.patch_len;
    let mut input = patches.clone();
    let mut target_rows = Vec::new();
    for (i, &m) in masked.iter().enumerate() {
        if m {
            input.data_mut()[i * p_len..(i + 1) * p_len].fill(T::zero());
            target_rows.push(patches.row(i).to_vec());
        }
    }
    let input = tape.constant(input);
    let (reps, mut leaves) = enc.encode_patches(tape, input)?;
    let rows: Vec<Var> = masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| tape.slice_rows(reps, i, i + 1))
        .collect::<Result<_>>()?;
    let picked = tape.concat_rows(&rows)?;
    let w = tape.leaf(&dec.weight);
    let b = tape.leaf(&dec.bias);
    leaves.extend([w, b]);
    let recon = tape.matmul(picked, w)?;
    let recon = tape.add_row(recon, b)?;
    let target = tape.constant(Tensor::from_rows(&target_rows)?);
    Ok((tape.mse_loss(recon, target)?, leaves))
}

/// Mean masked-reconstruction MSE over `series` with seeded masks.
pub fn reconstruction_mse<T: Real>(
    enc: &TsfmWeights<T>,
    dec: &PatchDecoder<T>,
    series: &[Tensor<T>],
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty("reconstruction corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in series {
        let masked = mask_for(enc.config.n_patches(s.numel()), mask_ratio, &mut rng);
        let mut tape = GradTape::new();
        let (loss, _) = masked_loss(&mut tape, enc, dec, s.data(), &masked)?;
        total += tape.value(loss)[0].as_f64();
    }
    Ok(total / series.len() as f64)
}

/// Fits the encoder by reconstructing randomly masked patches, then freezes it.
///
/// Each corpus entry is one window. With `epochs == 0` the seeded
/// initialization is returned unchanged.
pub fn pretrain_masked<T: Real>(
    series: &[Tensor<T>],
    config: &TsfmConfig,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome<T>> {
    if series.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if !(opts.mask_ratio > 0.0 && opts.mask_ratio < 1.0) {
        return Err(Error::Config(format!(
            "mask_ratio must lie in (0, 1), got {}",
            opts.mask_ratio
        )));
    }
    let mut enc = init_tsfm::<T>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7473_666d);
    let mut dec = PatchDecoder {
        weight: Tensor::randn([config.d_ts, config.patch_len], INIT_STD, &mut rng)
            .with_requires_grad(true),
        bias: Tensor::zeros([config.patch_len]).with_requires_grad(true),
    };
    enc.set_requires_grad(true);

    let mut losses = vec![reconstruction_mse(&enc, &dec, series, opts.mask_ratio, opts.seed)?];
    let mut state = {
        let mut all: Vec<&Tensor<T>> = enc.named_tensors().into_iter().map(|(_, t)| t).collect();
        all.extend([&dec.weight, &dec.bias]);
        AdamState::new(&all)
    };
    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..series.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut sums: Option<Vec<Vec<T>>> = None;
            for &i in chunk {
                let masked = mask_for(config.n_patches(series[i].numel()), opts.mask_ratio, &mut rng);
                let mut tape = GradTape::new();
                let (loss, leaves) = masked_loss(&mut tape, &enc, &dec, series[i].data(), &masked)?;
                let lv = tape.value(loss)[0];
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("pretraining loss at epoch {}", epoch + 1)));
                }
                tape.backward(loss)?;
                let grads: Vec<Vec<T>> = leaves
                    .iter()
                    .map(|&v| tape.grad(v).map(<[T]>::to_vec).unwrap_or_default())
                    .collect();
                match &mut sums {
                    None => sums = Some(grads),
                    Some(s) => {
                        for (acc, g) in s.iter_mut().zip(grads) {
                            if acc.is_empty() {
                                *acc = g;
                            } else if !g.is_empty() {
                                acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
                            }
                        }
                    }
                }
            }
            let inv = T::lit(1.0 / chunk.len() as f64);
            let sums = sums.expect("non-empty chunk");
            let mut params = enc.tensors_mut();
            params.extend([&mut dec.weight, &mut dec.bias]);
            for (p, g) in params.iter_mut().zip(&sums) {
                p.clear_grad();
                if g.is_empty() {
                    p.accumulate_grad(&vec![T::zero(); p.numel()])?;
                } else {
                    let scaled: Vec<T> = g.iter().map(|&x| x * inv).collect();
                    p.accumulate_grad(&scaled)?;
                }
            }
            adam_step(&mut params, &mut state, opts.lr)?;
        }
        losses.push(reconstruction_mse(&enc, &dec, series, opts.mask_ratio, opts.seed)?);
    }
    enc.set_requires_grad(false);
    dec.weight.set_requires_grad(false);
    dec.bias.set_requires_grad(false);
    Ok(PretrainOutcome {
        weights: enc,
        decoder: dec,
        epoch_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TsfmConfig {
        TsfmConfig {
            patch_len: 8,
            d_ts: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_patches: 8,
            init_seed: 5,
        }
    }

    #[test]
    fn patchify_partitions_in_order() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify(&x, 8).unwrap();
        assert_eq!(p.shape(), &[2, 8]);
        assert_eq!(p.row(0), &x[..8]);
        assert_eq!(p.data(), &x[..]);
    }

    #[test]
    fn patchify_long_window() {
        let x = vec![0.0f64; 512];
        assert_eq!(patchify(&x, 8).unwrap().shape(), &[64, 8]);
    }

    #[test]
    fn patchify_left_pads_with_first_value() {
        let x = [5.0f64, 1.0, 2.0];
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.data(), &[5.0, 5.0, 1.0, 2.0]);
        assert!(matches!(patchify::<f64>(&[], 8), Err(Error::Empty(_))));
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let w = init_tsfm::<f64>(&small()).unwrap();
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.3).sin()).collect();
        let a = w.encode(&x).unwrap();
        let b = w.encode(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reps.shape(), &[4, 8]);
        assert!(w.encode(&[f64::NAN; 8]).is_err());
    }

    #[test]
    fn encoder_is_position_aware_and_bidirectional() {
        let w = init_tsfm::<f64>(&small()).unwrap();
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.37).sin() + 0.1 * t as f64).collect();
        let base = w.encode(&x).unwrap().reps;

        let mut shuffled = x.clone();
        shuffled[..8].copy_from_slice(&x[8..16]);
        shuffled[8..16].copy_from_slice(&x[..8]);
        assert_ne!(w.encode(&shuffled).unwrap().reps, base);

        let mut late = x.clone();
        late[31] += 1.0;
        let changed = w.encode(&late).unwrap().reps;
        assert_ne!(changed.row(0), base.row(0));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = vec![Tensor::<f64>::from_vec((0..32).map(|t| t as f64).collect())];
        let out = pretrain_masked(
            &corpus,
            &small(),
            &PretrainOptions {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.weights, init_tsfm::<f64>(&small()).unwrap());
        assert_eq!(out.epoch_losses.len(), 1);
    }

    #[test]
    fn pretraining_rejects_bad_inputs() {
        let corpus = vec![Tensor::<f64>::from_vec(vec![0.0; 16])];
        let bad = PretrainOptions {
            mask_ratio: 1.0,
            ..Default::default()
        };
        assert!(pretrain_masked(&corpus, &small(), &bad).is_err());
        assert!(matches!(
            pretrain_masked::<f64>(&[], &small(), &PretrainOptions::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = init_tsfm::<f64>(&small()).unwrap();
        let back = TsfmWeights::<f64>::from_checkpoint(&w.to_checkpoint()).unwrap();
        assert_eq!(w, back);
    }
}
