use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `x_c[t] = level + trend·t + Σ_k a_k·g_c·sin(2π·(t mod P_k)/P_k + φ_{c,k}) + noise·ε_t`,
/// with a per-channel gain `g_c ~ U[0.5, 1.5]` and phases `φ_{c,k} ~ U[0, 2π)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinMixParams {
    pub periods: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub level: f64,
    pub trend: f64,
    pub noise_std: f64,
}

impl Default for SinMixParams {
    fn default() -> Self {
        SinMixParams {
            periods: vec![24, 96],
            amplitudes: vec![1.0, 0.6],
            level: 0.0,
            trend: 5e-4,
            noise_std: 0.1,
        }
    }
}

/// `x[t] = Σ φ_i·x[t-i] + ε_t + Σ θ_j·ε_{t-j}` with `x[0] = x0` and zero
/// history before it; the first `burn_in` steps are discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmaParams {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub noise_std: f64,
    pub x0: f64,
    pub burn_in: usize,
}

impl Default for ArmaParams {
    fn default() -> Self {
        ArmaParams {
            phi: vec![0.9],
            theta: vec![],
            noise_std: 0.1,
            x0: 0.0,
            burn_in: 100,
        }
    }
}

/// Constant levels `~ N(0, level_std²)` held for segment lengths drawn
/// uniformly from `[min_segment, max_segment]`, plus noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseParams {
    pub min_segment: usize,
    pub max_segment: usize,
    pub level_std: f64,
    pub noise_std: f64,
}

impl Default for PiecewiseParams {
    fn default() -> Self {
        PiecewiseParams {
            min_segment: 50,
            max_segment: 200,
            level_std: 1.0,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    Sinmix(SinMixParams),
    Arma(ArmaParams),
    PiecewiseLevel(PiecewiseParams),
}

impl SynthKind {
    /// Default parameters for a kind name.
    pub fn named(kind: &str) -> Result<Self> {
        match kind {
            "sinmix" => Ok(SynthKind::Sinmix(Default::default())),
            "arma" => Ok(SynthKind::Arma(Default::default())),
            "piecewise_level" => Ok(SynthKind::PiecewiseLevel(Default::default())),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?} (expected sinmix, arma or piecewise_level)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Sinmix(_) => "sinmix",
            SynthKind::Arma(_) => "arma",
            SynthKind::PiecewiseLevel(_) => "piecewise_level",
        }
    }

    fn formula(&self) -> &'static str {
        match self {
            SynthKind::Sinmix(_) => {
                "x_c[t] = level + trend*t + sum_k a_k*g_c*sin(2*pi*(t mod P_k)/P_k + phi_ck) + noise_std*e_t; g_c ~ U[0.5,1.5], phi_ck ~ U[0,2pi)"
            }
            SynthKind::Arma(_) => {
                "x[t] = sum_i phi_i*x[t-i] + e_t + sum_j theta_j*e_(t-j); x[0] = x0 + e_0; e_t ~ N(0, noise_std^2); first burn_in steps dropped"
            }
            SynthKind::PiecewiseLevel(_) => {
                "x[t] = level_s + noise_std*e_t; segment lengths ~ U{min_segment..max_segment}, level_s ~ N(0, level_std^2)"
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            SynthKind::Sinmix(p) => {
                if p.periods.is_empty() || p.periods.len() != p.amplitudes.len() {
                    return bad("sinmix needs one amplitude per period".into());
                }
                if p.periods.contains(&0) {
                    return bad("sinmix periods must be positive".into());
                }
                if p.noise_std < 0.0 {
                    return bad("noise_std must be non-negative".into());
                }
            }
            SynthKind::Arma(p) => {
                if p.noise_std < 0.0 {
                    return bad("noise_std must be non-negative".into());
                }
            }
            SynthKind::PiecewiseLevel(p) => {
                if p.min_segment == 0 || p.min_segment > p.max_segment {
                    return bad("piecewise segments need 1 <= min_segment <= max_segment".into());
                }
                if p.noise_std < 0.0 || p.level_std < 0.0 {
                    return bad("standard deviations must be non-negative".into());
                }
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

fn sinmix(p: &SinMixParams, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gain: f64 = rng.gen_range(0.5..1.5);
    let phases: Vec<f64> = p.periods.iter().map(|_| rng.gen_range(0.0..TAU)).collect();
    (0..len)
        .map(|t| {
            let seasonal: f64 = p
                .periods
                .iter()
                .zip(&p.amplitudes)
                .zip(&phases)
                .map(|((&per, &a), &ph)| a * gain * (TAU * (t % per) as f64 / per as f64 + ph).sin())
                .sum();
            p.level + p.trend * t as f64 + seasonal + gaussian(rng, p.noise_std)
        })
        .collect()
}

fn arma(p: &ArmaParams, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let total = len + p.burn_in;
    let mut x = Vec::with_capacity(total);
    let mut e = Vec::with_capacity(total);
    for t in 0..total {
        let eps = gaussian(rng, p.noise_std);
        let mut v = if t == 0 { p.x0 } else { 0.0 };
        for (i, phi) in p.phi.iter().enumerate() {
            if t > i {
                v += phi * x[t - 1 - i];
            }
        }
        for (j, theta) in p.theta.iter().enumerate() {
            if t > j {
                v += theta * e[t - 1 - j];
            }
        }
        e.push(eps);
        x.push(v + eps);
    }
    x.split_off(p.burn_in)
}

fn piecewise(p: &PiecewiseParams, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let seg = rng.gen_range(p.min_segment..=p.max_segment);
        let level = gaussian(rng, p.level_std);
        for _ in 0..seg.min(len - out.len()) {
            out.push(level + gaussian(rng, p.noise_std));
        }
    }
    out
}

/// Seeded synthetic series; channel `c` draws from its own random stream.
pub fn synth(kind: &SynthKind, length: usize, channels: usize, seed: u64) -> Result<RawSeries> {
    if length == 0 || channels == 0 {
        return Err(Error::Config("length and channels must be positive".into()));
    }
    kind.validate()?;
    let mut data = Vec::with_capacity(length * channels);
    for c in 0..channels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        data.extend(match kind {
            SynthKind::Sinmix(p) => sinmix(p, length, &mut rng),
            SynthKind::Arma(p) => arma(p, length, &mut rng),
            SynthKind::PiecewiseLevel(p) => piecewise(p, length, &mut rng),
        });
    }
    let metadata = serde_json::json!({
        "generator": kind,
        "formula": kind.formula(),
        "length": length,
        "channels": channels,
        "seed": seed,
    });
    Ok(RawSeries {
        name: kind.name().to_string(),
        timestamps: None,
        values: Tensor::new([channels, length], data)?,
        channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
        metadata: Some(metadata),
    })
}

/// Writes `series` as CSV (timestamps first when present). Floats use the
/// shortest representation that reads back to the same value.
pub fn write_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::new();
    if series.timestamps.is_some() {
        header.push("date".to_string());
    }
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(ts) = &series.timestamps {
            rec.push(ts[t].clone());
        }
        rec.extend((0..series.n_channels()).map(|c| series.channel(c)[t].to_string()));
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes the generator metadata as pretty JSON to `path`.
pub fn write_sidecar(series: &RawSeries, path: &Path) -> Result<()> {
    let meta = series.metadata.clone().unwrap_or(serde_json::Value::Null);
    write_atomic(path, serde_json::to_string_pretty(&meta)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sinmix_is_periodic() {
        let kind = SynthKind::Sinmix(SinMixParams {
            periods: vec![64],
            amplitudes: vec![1.3],
            level: 0.5,
            trend: 0.0,
            noise_std: 0.0,
        });
        let s = synth(&kind, 500, 2, 9).unwrap();
        for c in 0..2 {
            let x = s.channel(c);
            for t in 0..500 - 64 {
                assert_eq!(x[t], x[t + 64]);
            }
        }
        assert_ne!(s.channel(0), s.channel(1));
    }

    #[test]
    fn deterministic_per_seed() {
        for name in ["sinmix", "arma", "piecewise_level"] {
            let k = SynthKind::named(name).unwrap();
            assert_eq!(synth(&k, 300, 3, 4).unwrap(), synth(&k, 300, 3, 4).unwrap());
            assert_ne!(synth(&k, 300, 3, 4).unwrap(), synth(&k, 300, 3, 5).unwrap());
        }
    }

    #[test]
    fn ar1_decays_geometrically() {
        let kind = SynthKind::Arma(ArmaParams {
            phi: vec![0.9],
            theta: vec![],
            noise_std: 0.0,
            x0: 1.0,
            burn_in: 0,
        });
        let s = synth(&kind, 40, 1, 0).unwrap();
        for (t, &v) in s.channel(0).iter().enumerate() {
            assert!((v - 0.9f64.powi(t as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_params() {
        let k = SynthKind::Sinmix(SinMixParams {
            periods: vec![0],
            amplitudes: vec![1.0],
            ..Default::default()
        });
        assert!(synth(&k, 10, 1, 0).is_err());
        assert!(synth(&SynthKind::named("arma").unwrap(), 0, 1, 0).is_err());
        assert!(SynthKind::named("walk").is_err());
    }

    #[test]
    fn metadata_records_generator() {
        let s = synth(&SynthKind::named("sinmix").unwrap(), 10, 1, 3).unwrap();
        let m = s.metadata.unwrap();
        assert_eq!(m["generator"]["kind"], "sinmix");
        assert_eq!(m["seed"], 3);
    }
}
