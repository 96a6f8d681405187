//! Run configuration: newline-delimited `key=value` files with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msef::backbone::BackboneConfig;
use msef::data::{SplitScheme, SynthKind};
use msef::eval::AblationCell;
use msef::fusion::{parse_interval, FusionConfig, Mode};
use msef::numerics::Precision;
use msef::training::TrainConfig;
use msef::tsfm::{PretrainOptions, TsfmConfig};

use crate::Failure;

/// Every recognised key with its default. `-` marks "unset".
const DEFAULTS: &[(&str, &str)] = &[
    ("data", "-"),
    ("synth", "-"),
    ("out", "-"),
    ("precision", "f32"),
    ("split", "ratio"),
    ("train_ratio", "0.7"),
    ("test_ratio", "0.2"),
    ("n_layers", "4"),
    ("d_model", "64"),
    ("n_heads", "4"),
    ("d_ff", "256"),
    ("max_seq", "2048"),
    ("backbone_seed", "0"),
    ("patch_len", "8"),
    ("d_ts", "32"),
    ("ts_layers", "2"),
    ("ts_heads", "4"),
    ("ts_d_ff", "128"),
    ("tsfm_seed", "1"),
    ("tsfm", "-"),
    ("pretrain_epochs", "0"),
    ("pretrain_lr", "0.001"),
    ("pretrain_mask_ratio", "0.3"),
    ("mode", "full"),
    ("interval", "all"),
    ("steering_len", "4"),
    ("horizon", "96"),
    ("lookback", "512"),
    ("plain_steps", "128"),
    ("train_projection", "false"),
    ("lr", "0.001"),
    ("batch_size", "32"),
    ("max_epochs", "50"),
    ("patience", "3"),
    ("seed", "0"),
    ("few_shot_ratio", "0.1"),
    ("train_stride", "1"),
    ("eval_stride", "1"),
    ("horizons", "96,192,336,720"),
    ("seeds", "1,2,3"),
    ("modes", "full,no_steering,plain"),
    ("intervals", "-"),
];

/// Fully resolved settings. Values are kept as text so the file written to
/// the run directory is exactly what was used.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let key = key.trim().replace('-', "_");
        match self.values.get_mut(&key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Failure::usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Failure> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Failure::usage(format!("{origin}:{}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), Failure> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| *v != "-")
    }

    fn get<V: FromStr>(&self, key: &str) -> Result<V, Failure> {
        let raw = self.values.get(key).map(String::as_str).unwrap_or("-");
        raw.parse()
            .map_err(|_| Failure::usage(format!("invalid value {raw:?} for {key}")))
    }

    fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>, Failure> {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(s) => s
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Failure::usage(format!("invalid entry {t:?} in {key}")))
                })
                .collect(),
        }
    }

    pub fn precision(&self) -> Result<Precision, Failure> {
        Precision::parse(&self.values["precision"]).map_err(Failure::from)
    }

    pub fn out_dir(&self) -> Result<PathBuf, Failure> {
        self.raw("out")
            .map(PathBuf::from)
            .ok_or_else(|| Failure::usage("an output directory is required (--out)"))
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        self.raw("data").map(PathBuf::from)
    }

    /// `kind:length:channels:seed`.
    pub fn synth_spec(&self) -> Result<Option<(SynthKind, usize, usize, u64)>, Failure> {
        let Some(spec) = self.raw("synth") else {
            return Ok(None);
        };
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Failure::usage(format!("synth spec {spec:?} must be kind:length:channels:seed"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let kind = SynthKind::named(parts[0])?;
        let length = parts[1].parse().map_err(|_| bad())?;
        let channels = parts[2].parse().map_err(|_| bad())?;
        let seed = parts[3].parse().map_err(|_| bad())?;
        Ok(Some((kind, length, channels, seed)))
    }

    pub fn scheme(&self) -> Result<SplitScheme, Failure> {
        match self.values["split"].as_str() {
            "ratio" => Ok(SplitScheme::Ratio {
                train: self.get("train_ratio")?,
                test: self.get("test_ratio")?,
            }),
            other => SplitScheme::parse(other).map_err(Failure::from),
        }
    }

    pub fn backbone(&self) -> Result<BackboneConfig, Failure> {
        let c = BackboneConfig {
            n_layers: self.get("n_layers")?,
            d_model: self.get("d_model")?,
            n_heads: self.get("n_heads")?,
            d_ff: self.get("d_ff")?,
            max_seq: self.get("max_seq")?,
            init_seed: self.get("backbone_seed")?,
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn tsfm(&self) -> Result<TsfmConfig, Failure> {
        let c = TsfmConfig {
            patch_len: self.get("patch_len")?,
            d_ts: self.get("d_ts")?,
            n_layers: self.get("ts_layers")?,
            n_heads: self.get("ts_heads")?,
            d_ff: self.get("ts_d_ff")?,
            max_patches: self.get::<usize>("lookback")?.div_ceil(self.get::<usize>("patch_len")?.max(1)),
            init_seed: self.get("tsfm_seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn tsfm_checkpoint(&self) -> Option<PathBuf> {
        self.raw("tsfm").map(PathBuf::from)
    }

    pub fn pretrain(&self) -> Result<PretrainOptions, Failure> {
        Ok(PretrainOptions {
            mask_ratio: self.get("pretrain_mask_ratio")?,
            epochs: self.get("pretrain_epochs")?,
            seed: self.get("seed")?,
            lr: self.get("pretrain_lr")?,
            batch_size: self.get("batch_size")?,
        })
    }

    pub fn interval(&self) -> Result<Option<(usize, usize)>, Failure> {
        match self.values["interval"].as_str() {
            "all" | "-" => Ok(None),
            s => Ok(Some(parse_interval(s)?)),
        }
    }

    /// Fusion settings for `dataset`; the backbone depth is checked too.
    pub fn fusion(&self, dataset: &str) -> Result<FusionConfig, Failure> {
        let c = FusionConfig {
            mode: Mode::parse(&self.values["mode"])?,
            interval: self.interval()?,
            steering_len: self.get("steering_len")?,
            horizon: self.get("horizon")?,
            lookback: self.get("lookback")?,
            dataset: dataset.to_string(),
            plain_steps: self.get("plain_steps")?,
            train_projection: self.get("train_projection")?,
            init_seed: self.get("seed")?,
        };
        c.validate(self.get("n_layers")?)?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, Failure> {
        let c = TrainConfig {
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            seed: self.get("seed")?,
            few_shot_ratio: self.get("few_shot_ratio")?,
            horizon: self.get("horizon")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn horizon(&self) -> Result<usize, Failure> {
        self.get("horizon")
    }

    pub fn train_stride(&self) -> Result<usize, Failure> {
        positive(self.get("train_stride")?, "train_stride")
    }

    pub fn eval_stride(&self) -> Result<usize, Failure> {
        positive(self.get("eval_stride")?, "eval_stride")
    }

    pub fn horizons(&self) -> Result<Vec<usize>, Failure> {
        let h: Vec<usize> = self.list("horizons")?;
        if h.is_empty() || h.contains(&0) {
            return Err(Failure::usage("horizons must be a non-empty list of positive integers"));
        }
        Ok(h)
    }

    pub fn seeds(&self) -> Result<Vec<u64>, Failure> {
        let s: Vec<u64> = self.list("seeds")?;
        if s.is_empty() {
            return Err(Failure::usage("seeds must not be empty"));
        }
        Ok(s)
    }

    /// Modes first, then intervals (each a full-mode cell).
    pub fn cells(&self) -> Result<Vec<AblationCell>, Failure> {
        let n_layers: usize = self.get("n_layers")?;
        let mut cells = Vec::new();
        if let Some(modes) = self.raw("modes") {
            for m in modes.split(',').filter(|t| !t.trim().is_empty()) {
                cells.push(AblationCell::mode(Mode::parse(m)?));
            }
        }
        if let Some(intervals) = self.raw("intervals") {
            for tok in intervals.split(',').filter(|t| !t.trim().is_empty()) {
                let (x, y) = parse_interval(tok)?;
                if y > n_layers {
                    return Err(Failure::usage(format!("interval {tok} exceeds the backbone depth {n_layers}")));
                }
                cells.push(AblationCell::interval(x, y));
            }
        }
        if cells.is_empty() {
            return Err(Failure::usage("no ablation cells: give --modes and/or --intervals"));
        }
        Ok(cells)
    }

    /// Parses every typed view once so that errors surface before any work.
    pub fn validate(&self) -> Result<(), Failure> {
        self.precision()?;
        self.scheme()?;
        self.backbone()?;
        self.tsfm()?;
        self.pretrain()?;
        self.fusion("check")?;
        self.train()?;
        self.train_stride()?;
        self.eval_stride()?;
        self.horizons()?;
        self.seeds()?;
        self.synth_spec()?;
        Ok(())
    }
}

fn positive(v: usize, key: &str) -> Result<usize, Failure> {
    if v == 0 {
        Err(Failure::usage(format!("{key} must be positive")))
    } else {
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_override_earlier_ones() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nmode = plain\n\nhorizon=192\n", "file").unwrap();
        c.apply_override("horizon=336").unwrap();
        assert_eq!(c.fusion("x").unwrap().mode, Mode::Plain);
        assert_eq!(c.horizon().unwrap(), 336);
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("few-shot-ratio", "0.05").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "x").unwrap();
        assert_eq!(back, c);
        assert!(c.to_text().contains("few_shot_ratio=0.05\n"));
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.apply_text("justtext", "f").is_err());
        c.set("lr", "fast").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("intervals", "2-1").unwrap();
        assert!(c.cells().is_err());
        c.set("intervals", "1-5").unwrap();
        assert!(c.cells().is_err());
    }

    #[test]
    fn synth_spec_parses() {
        let mut c = RunConfig::default();
        c.set("synth", "sinmix:4000:2:7").unwrap();
        let (_, len, ch, seed) = c.synth_spec().unwrap().unwrap();
        assert_eq!((len, ch, seed), (4000, 2, 7));
        c.set("synth", "sinmix:4000").unwrap();
        assert!(c.synth_spec().is_err());
    }
}
