//! Frozen decoder-only transformer with a per-layer prefix hook.
//!
//! At every layer the caller supplies a block of prefix rows that is
//! prepended to the running sequence states. The layer's outputs at the
//! prefix positions are dropped before the next layer (which receives a fresh
//! prefix), except at the last layer, where they are returned alongside the
//! sequence states.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, BlockVars, BlockWeights, INIT_STD, LN_EPS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Real, Tensor, Var};

/// Token id marking the start of a prompt.
pub const BOS: usize = 256;
/// Token id separating the prompt from serialized values.
pub const SEP: usize = 257;
/// 256 byte tokens plus [`BOS`] and [`SEP`].
pub const BYTE_VOCAB: usize = 258;

pub const COMPONENT: &str = "BACKBONE";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: BYTE_VOCAB,
            max_seq: 2048,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("backbone {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "backbone d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq * d
            + self.n_layers * BlockWeights::<f64>::param_count(d, self.d_ff)
            + 2 * d
    }
}

/// Which keys each query may attend to when `n_prefix` prefix rows precede
/// `n_seq` sequence rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskPolicy {
    pub n_prefix: usize,
    pub n_seq: usize,
}

impl MaskPolicy {
    /// Prefix queries see everything; a sequence query sees every prefix row
    /// and the sequence rows up to and including itself.
    pub fn allows(&self, query: usize, key: usize) -> bool {
        query < self.n_prefix || key < self.n_prefix || key <= query
    }

    pub fn matrix(&self) -> Arc<[bool]> {
        let n = self.n_prefix + self.n_seq;
        let mut m = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                m.push(self.allows(q, k));
            }
        }
        m.into()
    }
}

/// Frozen parameters of the decoder. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T> {
    pub config: BackboneConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<BlockWeights<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

/// Final-layer states returned by [`BackboneWeights::forward_with_injection`].
#[derive(Clone, Copy, Debug)]
pub struct InjectionOutput {
    pub prefix: Var,
    pub sequence: Var,
}

/// Seeded, frozen backbone.
pub fn init_backbone<T: Real>(config: &BackboneConfig) -> Result<BackboneWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let d = config.d_model;
    let token_embedding = Tensor::randn([config.vocab_size, d], INIT_STD, &mut rng);
    let position_embedding = Tensor::randn([config.max_seq, d], INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| BlockWeights::init(d, config.d_ff, &mut rng))
        .collect();
    Ok(BackboneWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_gamma: Tensor::full([d], T::one()),
        final_beta: Tensor::zeros([d]),
    })
}

impl<T: Real> BackboneWeights<T> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.token_embedding),
            ("pos_emb".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("layer{l}")));
        }
        out.push(("final_ln.gamma".to_string(), &self.final_gamma));
        out.push(("final_ln.beta".to_string(), &self.final_beta));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Token plus positional embedding; token `t` sits at position `offset + t`.
    pub fn embed_text(&self, token_ids: &[usize], offset: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if offset + token_ids.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: offset + token_ids.len(),
                max: cfg.max_seq,
            });
        }
        let mut data = Vec::with_capacity(token_ids.len() * d);
        for (t, &id) in token_ids.iter().enumerate() {
            if id >= cfg.vocab_size {
                return Err(Error::OutOfVocab {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            let tok = self.token_embedding.row(id);
            let pos = self.position_embedding.row(offset + t);
            data.extend(tok.iter().zip(pos).map(|(&a, &b)| a + b));
        }
        Tensor::new([token_ids.len(), d], data)
    }

    /// Runs every layer on `concat(prefix_provider(l), sequence)`.
    ///
    /// `prefix_provider` is called with the 1-based layer index and must
    /// return an `m_l × d_model` block (possibly zero rows). Prefix outputs
    /// are discarded after each layer except the last; the final layer norm
    /// is applied to both returned blocks.
    pub fn forward_with_injection<'a, F>(
        &'a self,
        tape: &mut GradTape<'a, T>,
        text: Var,
        mut prefix_provider: F,
    ) -> Result<InjectionOutput>
    where
        F: FnMut(&mut GradTape<'a, T>, usize) -> Result<Var>,
    {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n_seq = match tape.shape(text) {
            [n, c] if *c == d => *n,
            s => return Err(Error::shape("forward_with_injection", s, &[0, d])),
        };
        let mut seq = text;
        let mut last_out = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = prefix_provider(tape, l + 1)?;
            let n_prefix = match tape.shape(prefix) {
                [m, c] if *c == d => *m,
                s => return Err(Error::shape("prefix block", s, &[0, d])),
            };
            if n_prefix + n_seq > cfg.max_seq {
                return Err(Error::SequenceTooLong {
                    len: n_prefix + n_seq,
                    max: cfg.max_seq,
                });
            }
            let input = tape.concat_rows(&[prefix, seq])?;
            let mask = MaskPolicy { n_prefix, n_seq }.matrix();
            let vars = BlockVars::bind(tape, layer);
            let out = block_forward(tape, input, &vars, cfg.n_heads, &mask)?;
            tape.check_finite(out, &format!("backbone layer {}", l + 1))?;
            seq = tape.slice_rows(out, n_prefix, n_prefix + n_seq)?;
            last_out = Some(out);
        }
        let out = last_out.ok_or_else(|| Error::Config("backbone has no layers".into()))?;
        let g = tape.leaf(&self.final_gamma);
        let b = tape.leaf(&self.final_beta);
        let normed = tape.layer_norm(out, g, b, T::lit(LN_EPS))?;
        let rows = tape.shape(normed)[0];
        let n_prefix = rows - n_seq;
        Ok(InjectionOutput {
            prefix: tape.slice_rows(normed, 0, n_prefix)?,
            sequence: tape.slice_rows(normed, n_prefix, rows)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::for_real::<T>(COMPONENT);
        let c = &self.config;
        ck.set_config("n_layers", c.n_layers);
        ck.set_config("d_model", c.d_model);
        ck.set_config("n_heads", c.n_heads);
        ck.set_config("d_ff", c.d_ff);
        ck.set_config("vocab_size", c.vocab_size);
        ck.set_config("max_seq", c.max_seq);
        ck.set_config("init_seed", c.init_seed);
        for (name, t) in self.named_tensors() {
            ck.push(&name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_component(COMPONENT)?;
        let config = BackboneConfig {
            n_layers: ck.parse_config("n_layers")?,
            d_model: ck.parse_config("d_model")?,
            n_heads: ck.parse_config("n_heads")?,
            d_ff: ck.parse_config("d_ff")?,
            vocab_size: ck.parse_config("vocab_size")?,
            max_seq: ck.parse_config("max_seq")?,
            init_seed: ck.parse_config("init_seed")?,
        };
        config.validate()?;
        let mut w = init_backbone::<T>(&config)?;
        w.token_embedding = ck.tensor("tok_emb")?;
        w.position_embedding = ck.tensor("pos_emb")?;
        for (l, layer) in w.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut(&format!("layer{l}")) {
                *t = ck.tensor(&name)?;
            }
        }
        w.final_gamma = ck.tensor("final_ln.gamma")?;
        w.final_beta = ck.tensor("final_ln.beta")?;
        Ok(w)
    }
}
