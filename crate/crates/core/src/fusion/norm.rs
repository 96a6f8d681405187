use serde::{Deserialize, Serialize};

use crate::numerics::Real;

/// Lower bound on the scale used by [`normalize_instance`].
pub const NORM_EPS: f64 = 1e-5;

/// Statistics of one channel window, kept for denormalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub eps: f64,
}

impl InstanceStats {
    /// Divisor applied by normalization: `max(sigma, eps)`.
    pub fn scale(&self) -> f64 {
        self.sigma.max(self.eps)
    }
}

/// Standardizes `x` to zero mean and unit standard deviation.
///
/// A constant window maps to zeros. Statistics are accumulated in `f64`.
pub fn normalize_instance<T: Real>(x: &[T]) -> (Vec<T>, InstanceStats) {
    let n = x.len().max(1) as f64;
    let mu = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / n;
    let stats = InstanceStats {
        mu,
        sigma: var.sqrt(),
        eps: NORM_EPS,
    };
    let s = stats.scale();
    let out = x.iter().map(|v| T::lit((v.as_f64() - mu) / s)).collect();
    (out, stats)
}

/// `y·max(sigma, eps) + mu`, evaluated in `T` exactly as the training graph does.
pub fn denormalize<T: Real>(y_norm: &[T], stats: &InstanceStats) -> Vec<T> {
    let (s, mu) = (T::lit(stats.scale()), T::lit(stats.mu));
    y_norm.iter().map(|&y| y * s + mu).collect()
}
