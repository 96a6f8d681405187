//! Pre-norm transformer block shared by the decoder backbone and the
//! time-series encoder.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

/// Parameters of one attention + feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

const FIELD_NAMES: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v",
    "attn.b_v", "attn.w_o", "attn.b_o", "ln2.gamma", "ln2.beta", "ff.w1", "ff.b1", "ff.w2",
    "ff.b2",
];

impl<T: Real> BlockWeights<T> {
    /// Matrices and biases from normal(0, 0.02²); norm gains 1, shifts 0.
    pub fn init(d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let mut w = |shape: &[usize]| Tensor::randn(shape.to_vec(), INIT_STD, rng);
        let w_q = w(&[d_model, d_model]);
        let b_q = w(&[d_model]);
        let w_k = w(&[d_model, d_model]);
        let b_k = w(&[d_model]);
        let w_v = w(&[d_model, d_model]);
        let b_v = w(&[d_model]);
        let w_o = w(&[d_model, d_model]);
        let b_o = w(&[d_model]);
        let w_ff1 = w(&[d_model, d_ff]);
        let b_ff1 = w(&[d_ff]);
        let w_ff2 = w(&[d_ff, d_model]);
        let b_ff2 = w(&[d_model]);
        BlockWeights {
            ln1_gamma: Tensor::full([d_model], T::one()),
            ln1_beta: Tensor::zeros([d_model]),
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            ln2_gamma: Tensor::full([d_model], T::one()),
            ln2_beta: Tensor::zeros([d_model]),
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
        }
    }

    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        4 * d_model * d_model + 4 * d_model + 2 * d_model * d_ff + d_ff + d_model + 4 * d_model
    }

    fn fields(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        FIELD_NAMES
            .iter()
            .zip(self.fields())
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        FIELD_NAMES
            .iter()
            .zip(self.fields_mut())
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in self.fields_mut() {
            t.set_requires_grad(flag);
        }
    }
}

/// Block parameters placed on a tape.
pub(crate) struct BlockVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

impl BlockVars {
    pub(crate) fn bind<'a, T: Real>(tape: &mut GradTape<'a, T>, w: &'a BlockWeights<T>) -> Self {
        let mut l = |t: &'a Tensor<T>| tape.leaf(t);
        BlockVars {
            ln1: (l(&w.ln1_gamma), l(&w.ln1_beta)),
            q: (l(&w.w_q), l(&w.b_q)),
            k: (l(&w.w_k), l(&w.b_k)),
            v: (l(&w.w_v), l(&w.b_v)),
            o: (l(&w.w_o), l(&w.b_o)),
            ln2: (l(&w.ln2_gamma), l(&w.ln2_beta)),
            ff1: (l(&w.w_ff1), l(&w.b_ff1)),
            ff2: (l(&w.w_ff2), l(&w.b_ff2)),
        }
    }

    /// Trainable handles in the same order as [`BlockWeights::named`].
    pub(crate) fn vars(&self) -> [Var; 16] {
        [
            self.ln1.0, self.ln1.1, self.q.0, self.q.1, self.k.0, self.k.1, self.v.0, self.v.1,
            self.o.0, self.o.1, self.ln2.0, self.ln2.1, self.ff1.0, self.ff1.1, self.ff2.0,
            self.ff2.1,
        ]
    }
}

fn linear<T: Real>(tape: &mut GradTape<'_, T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `x + attn(ln1(x)); x + ff(ln2(x))` over the rows of `x`.
///
/// `allowed` is a row-major `n×n` visibility matrix (query row, key column).
pub(crate) fn block_forward<T: Real>(
    tape: &mut GradTape<'_, T>,
    x: Var,
    w: &BlockVars,
    n_heads: usize,
    allowed: &Arc<[bool]>,
) -> Result<Var> {
    let eps = T::lit(LN_EPS);
    let d = *tape.shape(x).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let a = tape.layer_norm(x, w.ln1.0, w.ln1.1, eps)?;
    let q = linear(tape, a, w.q)?;
    let k = linear(tape, a, w.k)?;
    let v = linear(tape, a, w.v)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, allowed)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attn = linear(tape, merged, w.o)?;
    let x = tape.add(x, attn)?;

    let f = tape.layer_norm(x, w.ln2.0, w.ln2.1, eps)?;
    let f = linear(tape, f, w.ff1)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, w.ff2)?;
    tape.add(x, f)
}

/// Full visibility for `n` positions.
pub(crate) fn dense_mask(n: usize) -> Arc<[bool]> {
    vec![true; n * n].into()
}
