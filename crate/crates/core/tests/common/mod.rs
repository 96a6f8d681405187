//! Plain-loop f64 re-implementation of the model, written against the
//! weight layout only. Used as an oracle for the tape-based forward passes.
#![allow(dead_code)]

use msef::backbone::{init_backbone, BackboneConfig, BackboneWeights};
use msef::block::BlockWeights;
use msef::fusion::{FusionConfig, Mode, MsefModel};
use msef::numerics::Tensor;
use msef::tsfm::{init_tsfm, TsfmConfig, TsfmWeights};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecd(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, w: &Tensor<f64>) -> Mat {
    let (k, n) = (w.rows(), w.cols());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: Mat, b: &Tensor<f64>) -> Mat {
    a.into_iter()
        .map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y).collect())
        .collect()
}

fn linear(a: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    add_bias(matmul(a, w), b)
}

pub fn layer_norm(a: &Mat, g: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) * inv * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// One pre-norm block; `allowed(q, k)` decides visibility.
pub fn block(x: &Mat, w: &BlockWeights<f64>, n_heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let dh = d / n_heads;
    let a = layer_norm(x, &w.ln1_gamma, &w.ln1_beta);
    let q = linear(&a, &w.w_q, &w.b_q);
    let k = linear(&a, &w.w_k, &w.b_k);
    let v = linear(&a, &w.w_v, &w.b_v);
    let mut merged = vec![vec![0.0; d]; n];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = keys.iter().zip(&e).map(|(&j, &p)| p / z * v[j][c]).sum();
            }
        }
    }
    let attn = linear(&merged, &w.w_o, &w.b_o);
    let x: Mat = x.iter().zip(&attn).map(|(r, a)| r.iter().zip(a).map(|(p, q)| p + q).collect()).collect();
    let f = layer_norm(&x, &w.ln2_gamma, &w.ln2_beta);
    let f: Mat = linear(&f, &w.w_ff1, &w.b_ff1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = linear(&f, &w.w_ff2, &w.b_ff2);
    x.iter().zip(&f).map(|(r, a)| r.iter().zip(a).map(|(p, q)| p + q).collect()).collect()
}

pub fn embed(bb: &BackboneWeights<f64>, ids: &[usize], offset: usize) -> Mat {
    ids.iter()
        .enumerate()
        .map(|(t, &id)| {
            bb.token_embedding
                .row(id)
                .iter()
                .zip(bb.position_embedding.row(offset + t))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

/// Returns (final prefix states, final sequence states).
pub fn backbone_forward(bb: &BackboneWeights<f64>, text: &Mat, prefix: &dyn Fn(usize) -> Mat) -> (Mat, Mat) {
    let n_seq = text.len();
    let mut seq = text.clone();
    let mut last = Vec::new();
    for (l, layer) in bb.layers.iter().enumerate() {
        let pre = prefix(l + 1);
        let m = pre.len();
        let mut input = pre;
        input.extend(seq.iter().cloned());
        let out = block(&input, layer, bb.config.n_heads, &|q, k| q < m || k < m || k <= q);
        seq = out[m..].to_vec();
        last = out;
    }
    let normed = layer_norm(&last, &bb.final_gamma, &bb.final_beta);
    let m = normed.len() - n_seq;
    (normed[..m].to_vec(), normed[m..].to_vec())
}

pub fn tsfm_encode(ts: &TsfmWeights<f64>, x_norm: &[f64]) -> Mat {
    let p_len = ts.config.patch_len;
    let pad = (p_len - x_norm.len() % p_len) % p_len;
    let mut padded = vec![x_norm[0]; pad];
    padded.extend_from_slice(x_norm);
    let patches: Mat = padded.chunks(p_len).map(|c| c.to_vec()).collect();
    let mut h = linear(&patches, &ts.patch_weight, &ts.patch_bias);
    for (i, row) in h.iter_mut().enumerate() {
        for (v, p) in row.iter_mut().zip(ts.position.row(i)) {
            *v += p;
        }
    }
    for layer in &ts.layers {
        h = block(&h, layer, ts.config.n_heads, &|_, _| true);
    }
    layer_norm(&h, &ts.final_gamma, &ts.final_beta)
}

pub fn prompt_ids(dataset: &str, t: usize, h: usize, ch: usize) -> Vec<usize> {
    let mut ids = vec![256];
    ids.extend(format!("dataset:{dataset}|task:forecast|T:{t}|H:{h}|ch:{ch}").bytes().map(usize::from));
    ids
}

/// End-to-end forecast of one channel computed by hand.
pub fn forecast_channel(model: &MsefModel<f64>, x: &[f64], ch: usize) -> Vec<f64> {
    let cfg = model.config();
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let sigma = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let scale = sigma.max(1e-5);
    let xn: Vec<f64> = x.iter().map(|v| (v - mu) / scale).collect();
    let bb = &model.backbone;
    let d = bb.config.d_model;
    let l_total = bb.config.n_layers;
    let p = model.n_patches();
    let mut ids = prompt_ids(&cfg.dataset, cfg.lookback, cfg.horizon, ch);
    let (offset, ts_rows) = match cfg.mode {
        Mode::Plain => {
            ids.push(257);
            let vals: Vec<String> = xn[xn.len() - cfg.plain_steps..].iter().map(|v| format!("{v:.2}")).collect();
            ids.extend(vals.join(",").bytes().map(usize::from));
            (0, None)
        }
        mode => {
            let e = tsfm_encode(&model.tsfm, &xn);
            let proj = matmul(&e, &model.fusion.projection.weight);
            let m = if mode == Mode::Full { cfg.steering_len } else { 0 };
            (p + m, Some(proj))
        }
    };
    let text = embed(bb, &ids, offset);
    let (x0, y0) = cfg.interval.unwrap_or((1, l_total));
    let prefix = |l: usize| -> Mat {
        let Some(ts) = &ts_rows else { return Vec::new() };
        let mut rows = ts.clone();
        if cfg.mode == Mode::Full && (x0..=y0).contains(&l) {
            rows.extend(to_mat(model.fusion.bank.get(l)));
        }
        rows
    };
    let (pre, seq) = backbone_forward(bb, &text, &prefix);
    let states: Vec<f64> = match cfg.mode {
        Mode::Plain => seq[seq.len() - p..].concat(),
        _ => pre[..p].concat(),
    };
    assert_eq!(states.len(), p * d);
    let y = linear(&vec![states], &model.fusion.head.weight, &model.fusion.head.bias);
    y[0].iter().map(|v| v * scale + mu).collect()
}

/// Small model builder shared by integration tests.
pub struct Micro {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch_len: usize,
    pub d_ts: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub m: usize,
    pub seed: u64,
}

impl Default for Micro {
    fn default() -> Self {
        Micro {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            patch_len: 8,
            d_ts: 8,
            lookback: 32,
            horizon: 8,
            m: 2,
            seed: 0,
        }
    }
}

impl Micro {
    pub fn backbone(&self) -> BackboneWeights<f64> {
        init_backbone(&BackboneConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: 2 * self.d_model,
            max_seq: 512,
            init_seed: self.seed,
            ..Default::default()
        })
        .unwrap()
    }

    pub fn tsfm(&self) -> TsfmWeights<f64> {
        init_tsfm(&TsfmConfig {
            patch_len: self.patch_len,
            d_ts: self.d_ts,
            n_layers: 1,
            n_heads: 2,
            d_ff: 2 * self.d_ts,
            max_patches: 16,
            init_seed: self.seed + 1000,
        })
        .unwrap()
    }

    pub fn fusion(&self, mode: Mode) -> FusionConfig {
        FusionConfig {
            mode,
            steering_len: self.m,
            horizon: self.horizon,
            lookback: self.lookback,
            dataset: "micro".into(),
            plain_steps: self.lookback.min(16),
            init_seed: self.seed + 2000,
            ..Default::default()
        }
    }

    pub fn model(&self, mode: Mode) -> MsefModel<f64> {
        MsefModel::new(self.backbone(), self.tsfm(), self.fusion(mode)).unwrap()
    }

    pub fn model_with(&self, cfg: FusionConfig) -> MsefModel<f64> {
        MsefModel::new(self.backbone(), self.tsfm(), cfg).unwrap()
    }
}

/// Deterministic pseudo-random series in roughly [-3, 3].
pub fn wave(len: usize, seed: u64) -> Vec<f64> {
    let s = seed as f64;
    (0..len)
        .map(|t| {
            let t = t as f64;
            (0.31 * t + s).sin() * 2.0 + (0.07 * t * (1.0 + 0.1 * s)).cos() + 0.013 * t * ((s % 3.0) - 1.0)
        })
        .collect()
}

/// Steering vectors are random at init but small; enlarge them so their
/// effect is not drowned in rounding.
pub fn boost_steering(model: &mut MsefModel<f64>, factor: f64) {
    for e in &mut model.fusion.bank.entries {
        for v in e.data_mut() {
            *v *= factor;
        }
    }
}

pub fn vec_of(t: &Tensor<f64>) -> Vec<f64> {
    vecd(t)
}

/// Raw-scale MSE of one channel window plus the analytic gradient of every
/// trainable parameter, as the training loop computes them.
pub fn loss_and_grads(
    model: &MsefModel<f64>,
    x: &[f64],
    ch: usize,
    target: &[f64],
) -> (f64, Vec<(msef::fusion::ParamId, Vec<f64>)>) {
    use msef::numerics::GradTape;
    let input = model.prepare(x, ch).unwrap();
    let target = Tensor::new([1, target.len()], target.to_vec()).unwrap();
    let mut tape = GradTape::new();
    let pass = model.forward_on_tape(&mut tape, &input).unwrap();
    let scaled = tape.scale(pass.pred, input.stats.scale()).unwrap();
    let pred = tape.shift(scaled, input.stats.mu).unwrap();
    let t = tape.leaf(&target);
    let loss = tape.mse_loss(pred, t).unwrap();
    let value = tape.value(loss)[0];
    tape.backward(loss).unwrap();
    let grads = pass
        .params
        .iter()
        .filter_map(|&(id, v)| tape.grad(v).map(|g| (id, g.to_vec())))
        .collect();
    (value, grads)
}

/// Loss only, through the plain forecast path.
pub fn loss_only(model: &MsefModel<f64>, x: &[f64], ch: usize, target: &[f64]) -> f64 {
    let y = model.forecast_channel(x, ch).unwrap();
    y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// |a - n| / max(|a|, |n|, floor).
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between analytic gradients and a fourth-order
/// central difference, `(8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h`, over
/// every scalar of every trainable parameter.
pub fn max_grad_error(model: &mut MsefModel<f64>, x: &[f64], ch: usize, target: &[f64], h: f64, floor: f64) -> (f64, usize) {
    let (_, grads) = loss_and_grads(model, x, ch, target);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, g) in grads {
        for (k, &a) in g.iter().enumerate() {
            let orig = model.fusion.param(id).data()[k];
            let mut at = |d: f64| {
                model.fusion.param_mut(id).data_mut()[k] = orig + d;
                let v = loss_only(model, x, ch, target);
                model.fusion.param_mut(id).data_mut()[k] = orig;
                v
            };
            let n = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            worst = worst.max(rel_err(a, n, floor));
            checked += 1;
        }
    }
    (worst, checked)
}
