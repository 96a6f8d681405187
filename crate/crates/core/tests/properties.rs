mod common;

use common::*;
use msef::checkpoint::Checkpoint;
use msef::data::{make_eval_windows, make_splits, make_windows, RawSeries, SplitScheme};
use msef::eval::{mae, mse};
use msef::fusion::{denormalize, normalize_instance};
use msef::fusion::{Mode, MsefModel};
use msef::numerics::{softmax, Tensor};
use proptest::prelude::*;

fn series(len: usize, channels: usize) -> RawSeries {
    // Each value encodes its own time index so leakage is visible.
    let data = (0..channels)
        .flat_map(|c| (0..len).map(move |t| t as f64 + 0.25 * c as f64))
        .collect();
    RawSeries {
        name: "ramp".into(),
        timestamps: None,
        values: Tensor::new([channels, len], data).unwrap(),
        channel_names: (0..channels).map(|c| format!("c{c}")).collect(),
        metadata: None,
    }
}

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-100.0f64..100.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded(a in tensor_strategy(3, 7), b in tensor_strategy(3, 7)) {
        let m1 = mse(&a, &b).unwrap();
        let m2 = mse(&b, &a).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert!(m1 >= 0.0);
        prop_assert!(mae(&a, &b).unwrap() <= m1.sqrt() * (1.0 + 1e-12) + 1e-12);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_scale(a in tensor_strategy(2, 5), b in tensor_strategy(2, 5), k in 0.1f64..10.0) {
        let ka = a.map(|v| v * k);
        let kb = b.map(|v| v * k);
        let m = mse(&a, &b).unwrap();
        prop_assert!((mse(&ka, &kb).unwrap() - k * k * m).abs() <= 1e-9 * (1.0 + k * k * m));
        let e = mae(&a, &b).unwrap();
        prop_assert!((mae(&ka, &kb).unwrap() - k * e).abs() <= 1e-9 * (1.0 + k * e));
    }

    #[test]
    fn normalization_removes_affine_maps(
        x in prop::collection::vec(-50.0f64..50.0, 8..64),
        a in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
        b in -1e3f64..1e3,
    ) {
        let (xn, stats) = normalize_instance(&x);
        prop_assume!(stats.sigma > 1e-3);
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (mn, _) = normalize_instance(&moved);
        for (p, q) in xn.iter().zip(&mn) {
            prop_assert!((p - a.signum() * q).abs() <= 1e-8, "{} vs {}", p, q);
        }
        let back = denormalize(&xn, &stats);
        for (p, q) in back.iter().zip(&x) {
            prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
        }
        let mean = xn.iter().sum::<f64>() / xn.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(t in tensor_strategy(4, 6)) {
        let s = softmax(&t, 1).unwrap();
        for r in 0..4 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn windows_are_adjacent_and_contained(
        len in 60usize..200,
        lookback in 1usize..16,
        horizon in 1usize..16,
        stride in 1usize..5,
        lo in 0usize..20,
    ) {
        let s = series(len, 2);
        let range = lo..len;
        prop_assume!(range.len() >= lookback + horizon);
        let wins = make_windows::<f64>(&s, range.clone(), lookback, horizon, stride).unwrap();
        prop_assert!(!wins.is_empty());
        for w in &wins {
            prop_assert!(w.start >= range.start && w.target_start() + horizon <= range.end);
            // Target continues the input without gap or overlap.
            prop_assert_eq!(w.x.row(0)[lookback - 1] + 1.0, w.y.row(0)[0]);
            prop_assert_eq!(w.x.row(1)[0], w.start as f64 + 0.25);
        }
        for pair in wins.windows(2) {
            prop_assert_eq!(pair[1].start - pair[0].start, stride);
        }
        // The last admissible start is reached or within one stride.
        let last = wins.last().unwrap().start;
        prop_assert!(last + lookback + horizon <= range.end);
        prop_assert!(last + stride + lookback + horizon > range.end);
    }

    #[test]
    fn eval_targets_stay_in_range(len in 200usize..600, lookback in 4usize..48, horizon in 1usize..24) {
        let s = series(len, 1);
        let split = make_splits(len, SplitScheme::Ratio { train: 0.7, test: 0.2 }, 0.1).unwrap();
        prop_assume!(split.test.len() >= horizon && split.test.end >= lookback + horizon);
        let wins = make_eval_windows::<f64>(&s, split.test.clone(), lookback, horizon, 1).unwrap();
        for w in &wins {
            let first = w.y.row(0)[0] as usize;
            let last = w.y.row(0)[horizon - 1] as usize;
            prop_assert!(first >= split.test.start && last < split.test.end);
        }
        prop_assert_eq!(wins.last().unwrap().target_start() + horizon, split.test.end);
    }

    #[test]
    fn splits_partition_the_series(len in 20usize..5000, ratio in 0.01f64..1.0) {
        let s = make_splits(len, SplitScheme::Ratio { train: 0.7, test: 0.2 }, ratio).unwrap();
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, len);
        prop_assert!(s.few_shot.end <= s.train.end);
        prop_assert_eq!(s.few_shot.end, (ratio * s.train.len() as f64 + 1e-9).floor() as usize);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        vals in prop::collection::vec(prop::num::f64::ANY, 0..40),
        key in "[a-z]{1,8}",
        value in "[ -~]{0,16}",
    ) {
        let mut ck = Checkpoint::new("TEST", 8);
        ck.set_config(&key, &value);
        ck.push("t", &Tensor::new([vals.len()], vals.clone()).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.config_value(&key).unwrap(), value.as_str());
        let t: Tensor<f64> = back.tensor("t").unwrap();
        for (a, b) in t.data().iter().zip(&vals) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forecasts_are_affine_equivariant(
        seed in 0u64..1000,
        a in 0.05f64..20.0,
        b in -100.0f64..100.0,
        mode in prop_oneof![Just(Mode::Full), Just(Mode::NoSteering)],
    ) {
        let micro = Micro { d_model: 8, lookback: 16, horizon: 4, seed, ..Default::default() };
        let model = micro.model(mode);
        let x = wave(16, seed);
        let y = model.forecast_channel(&x, 0).unwrap();
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let y2 = model.forecast_channel(&moved, 0).unwrap();
        let scale = y.iter().map(|v| (a * v + b).abs()).fold(0.0, f64::max);
        for (p, q) in y.iter().zip(&y2) {
            prop_assert!((a * p + b - q).abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn model_checkpoint_round_trip(seed in 0u64..1000, mode in prop_oneof![Just(Mode::Full), Just(Mode::NoSteering), Just(Mode::Plain)]) {
        let micro = Micro { d_model: 8, lookback: 16, horizon: 4, seed, ..Default::default() };
        let model = micro.model(mode);
        let bytes = model.to_checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let back = MsefModel::from_checkpoint(&ck, micro.backbone(), micro.tsfm()).unwrap();
        let x = wave(16, seed);
        prop_assert_eq!(model.forecast_channel(&x, 1).unwrap(), back.forecast_channel(&x, 1).unwrap());
        prop_assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
