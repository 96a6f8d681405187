mod common;

use std::sync::Arc;

use common::*;
use msef::fusion::{Mode, ParamId};
use msef::numerics::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Graph = dyn Fn(&mut GradTape<'_, f64>, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .unwrap()
        .with_requires_grad(true)
}

fn eval(inputs: &[Tensor<f64>], f: &Graph) -> f64 {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    tape.value(out)[0]
}

/// Compares tape gradients of a scalar graph with central differences.
fn check(inputs: Vec<Tensor<f64>>, f: &Graph) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect()
    };
    let mut worst = 0.0f64;
    let h = 1e-5;
    for i in 0..inputs.len() {
        for k in 0..inputs[i].numel() {
            let mut probe = inputs.clone();
            probe[i].data_mut()[k] += h;
            let up = eval(&probe, f);
            probe[i].data_mut()[k] -= 2.0 * h;
            let down = eval(&probe, f);
            let n = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][k], n, 1e-6));
        }
    }
    worst
}

/// Weighted sum so every output element gets a distinct sensitivity.
fn reduce(tape: &mut GradTape<'_, f64>, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.3).collect()).unwrap());
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

const SEEDS: u64 = 20;

fn run(shapes: &[&[usize]], f: &Graph) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = check(inputs, f);
        assert!(err <= 1e-5, "seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_and_transposed_matmul() {
    run(&[&[3, 4], &[4, 5]], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        reduce(t, y)
    });
    run(&[&[3, 4], &[5, 4]], &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        reduce(t, y)
    });
}

#[test]
fn elementwise_ops() {
    run(&[&[2, 3], &[2, 3], &[1, 3]], &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let b = t.sub(a, v[1]).unwrap();
        let c = t.mul(b, v[1]).unwrap();
        let d = t.add_row(c, v[2]).unwrap();
        let e = t.scale(d, -1.7).unwrap();
        let g = t.shift(e, 0.4).unwrap();
        let h = t.gelu(g).unwrap();
        reduce(t, h)
    });
}

#[test]
fn reductions_and_loss() {
    run(&[&[3, 3], &[3, 3]], &|t, v| {
        let m = t.mse_loss(v[0], v[1]).unwrap();
        let s = t.mean(v[0]).unwrap();
        let both = t.mul(m, s).unwrap();
        t.sum(both).unwrap()
    });
}

#[test]
fn softmax_both_axes_and_masked() {
    run(&[&[3, 4]], &|t, v| {
        let a = t.softmax(v[0], 1).unwrap();
        let b = t.softmax(a, 0).unwrap();
        reduce(t, b)
    });
    let mask: Arc<[bool]> = (0..12).map(|i| i % 4 <= i / 4 + 1).collect();
    run(&[&[3, 4]], &move |t, v| {
        let a = t.masked_softmax(v[0], &mask).unwrap();
        reduce(t, a)
    });
}

#[test]
fn layer_norm_with_affine() {
    run(&[&[3, 5], &[1, 5], &[1, 5]], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        reduce(t, y)
    });
}

#[test]
fn shape_ops() {
    run(&[&[2, 3], &[1, 3], &[2, 2]], &|t, v| {
        let r = t.concat_rows(&[v[0], v[1]]).unwrap();
        let tr = t.transpose(r).unwrap();
        let s = t.slice_rows(tr, 1, 3).unwrap();
        let c = t.concat_cols(&[s, v[2]]).unwrap();
        let sc = t.slice_cols(c, 1, 4).unwrap();
        let rs = t.reshape(sc, &[1, 6]).unwrap();
        reduce(t, rs)
    });
}

#[test]
fn model_gradients_every_mode() {
    // A smaller model than the acceptance run, checked in every mode.
    for seed in 0..4 {
        let micro = Micro {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            patch_len: 8,
            d_ts: 4,
            lookback: 16,
            horizon: 3,
            m: 1,
            seed,
        };
        for mode in [Mode::Full, Mode::NoSteering, Mode::Plain] {
            let mut model = micro.model(mode);
            boost_steering(&mut model, 20.0);
            let x = wave(16, seed + 3);
            let target: Vec<f64> = (0..3).map(|i| (i as f64 + seed as f64).cos()).collect();
            let (err, n) = max_grad_error(&mut model, &x, 1, &target, 5e-4, 1e-7);
            assert!(n == model.trainable_count(), "{mode}: checked {n}");
            assert!(err <= 1e-4, "{mode} seed {seed}: {err}");
        }
    }
}

#[test]
fn projection_gradient_when_trainable() {
    let micro = Micro {
        d_model: 8,
        d_ts: 4,
        lookback: 16,
        horizon: 2,
        m: 1,
        ..Default::default()
    };
    let mut cfg = micro.fusion(Mode::Full);
    cfg.train_projection = true;
    let mut model = micro.model_with(cfg);
    let x = wave(16, 1);
    let (_, grads) = loss_and_grads(&model, &x, 0, &[0.5, -0.5]);
    assert!(grads.iter().any(|(id, _)| *id == ParamId::Projection));
    let (err, _) = max_grad_error(&mut model, &x, 0, &[0.5, -0.5], 5e-4, 1e-7);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn steering_gradients_reach_every_interval_layer() {
    let micro = Micro {
        n_layers: 4,
        d_model: 8,
        lookback: 16,
        horizon: 2,
        ..Default::default()
    };
    let mut cfg = micro.fusion(Mode::Full);
    cfg.interval = Some((2, 4));
    let model = micro.model_with(cfg);
    let (_, grads) = loss_and_grads(&model, &wave(16, 2), 0, &[1.0, 2.0]);
    let steered: Vec<usize> = grads
        .iter()
        .filter_map(|(id, g)| match id {
            ParamId::Steering(l) => {
                assert!(g.iter().any(|v| *v != 0.0), "layer {l} gradient is zero");
                Some(*l)
            }
            _ => None,
        })
        .collect();
    assert_eq!(steered, vec![2, 3, 4]);
}
