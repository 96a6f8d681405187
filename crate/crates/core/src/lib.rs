//! Few-shot forecasting by multi-layer steerable embedding fusion.
//!
//! A frozen patch encoder ([`tsfm`]) turns a normalized window into one
//! representation per patch. Those rows, projected to the decoder width and
//! followed by layer-specific trainable steering vectors, are prepended to
//! the sequence at every layer of a frozen decoder-only transformer
//! ([`backbone`]). A linear head reads the final states at the
//! representation positions. Only the steering bank and the head are
//! trained ([`training`]).
//!
//! ```
//! use msef::backbone::{init_backbone, BackboneConfig};
//! use msef::fusion::{FusionConfig, Mode, MsefModel};
//! use msef::numerics::Tensor;
//! use msef::tsfm::{init_tsfm, TsfmConfig};
//!
//! let backbone = init_backbone::<f64>(&BackboneConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, ..Default::default() })?;
//! let tsfm = init_tsfm::<f64>(&TsfmConfig { d_ts: 8, n_heads: 2, d_ff: 16, ..Default::default() })?;
//! let cfg = FusionConfig { mode: Mode::Full, steering_len: 2, horizon: 8, lookback: 32, ..Default::default() };
//! let model = MsefModel::new(backbone, tsfm, cfg)?;
//!
//! let x: Vec<f64> = (0..64).map(|t| (t as f64 * 0.3).sin()).collect();
//! let y = model.forecast(&Tensor::new([2, 32], x)?)?;
//! assert_eq!(y.shape(), &[2, 8]);
//! # Ok::<(), msef::Error>(())
//! ```

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod fusion;
pub mod numerics;
pub mod training;
pub mod tsfm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
