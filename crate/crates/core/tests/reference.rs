mod common;

use common::*;
use msef::backbone::{init_backbone, BackboneConfig};
use msef::fusion::{Mode, MsefModel};
use msef::numerics::{GradTape, Tensor};
use msef::tsfm::{init_tsfm, TsfmConfig};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

#[test]
fn backbone_matches_reference_with_prefix() {
    let bb = init_backbone::<f64>(&BackboneConfig {
        n_layers: 3,
        d_model: 12,
        n_heads: 3,
        d_ff: 20,
        max_seq: 64,
        init_seed: 4,
        ..Default::default()
    })
    .unwrap();
    let ids = [256usize, 10, 99, 3, 200, 257, 45];
    let prefixes: Vec<Tensor<f64>> = (0..3)
        .map(|l| {
            let rows = l + 1;
            Tensor::new([rows, 12], (0..rows * 12).map(|i| ((i * 7 + l) as f64 * 0.37).sin()).collect()).unwrap()
        })
        .collect();
    let text = bb.embed_text(&ids, 3).unwrap();
    let mut tape = GradTape::new();
    let tv = tape.leaf(&text);
    let out = bb
        .forward_with_injection(&mut tape, tv, |tape, l| Ok(tape.leaf(&prefixes[l - 1])))
        .unwrap();
    let (pre, seq) = backbone_forward(&bb, &embed(&bb, &ids, 3), &|l| to_mat(&prefixes[l - 1]));
    close(tape.value(out.sequence), &seq.concat(), 1e-12);
    close(tape.value(out.prefix), &pre.concat(), 1e-12);
    assert_eq!(tape.shape(out.prefix), &[3, 12]);
}

#[test]
fn tsfm_matches_reference() {
    let ts = init_tsfm::<f64>(&TsfmConfig {
        patch_len: 4,
        d_ts: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_patches: 8,
        init_seed: 3,
    })
    .unwrap();
    // 18 steps: two steps of left padding.
    let x = wave(18, 2);
    let got = ts.encode(&x).unwrap().reps;
    assert_eq!(got.shape(), &[5, 8]);
    close(got.data(), &tsfm_encode(&ts, &x).concat(), 1e-12);
}

#[test]
fn micro_model_matches_hand_computation() {
    // L=1, d=8, p=2, m=1, H=2.
    let micro = Micro {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        patch_len: 4,
        d_ts: 4,
        lookback: 8,
        horizon: 2,
        m: 1,
        seed: 11,
    };
    let mut model = micro.model(Mode::Full);
    boost_steering(&mut model, 50.0);
    let x = wave(8, 1);
    let got = model.forecast_channel(&x, 0).unwrap();
    close(&got, &forecast_channel(&model, &x, 0), 1e-11);
}

#[test]
fn every_mode_matches_reference() {
    let micro = Micro::default();
    for mode in [Mode::Full, Mode::NoSteering, Mode::Plain] {
        let mut model = micro.model(mode);
        boost_steering(&mut model, 30.0);
        for ch in 0..2 {
            let x = wave(32, ch as u64 + 5);
            let got = model.forecast_channel(&x, ch).unwrap();
            close(&got, &forecast_channel(&model, &x, ch), 1e-11);
        }
    }
}

#[test]
fn interval_subset_matches_reference() {
    let micro = Micro {
        n_layers: 4,
        ..Default::default()
    };
    let mut cfg = micro.fusion(Mode::Full);
    cfg.interval = Some((2, 3));
    let mut model: MsefModel<f64> = micro.model_with(cfg);
    boost_steering(&mut model, 30.0);
    let x = wave(32, 9);
    close(&model.forecast_channel(&x, 1).unwrap(), &forecast_channel(&model, &x, 1), 1e-11);
}
