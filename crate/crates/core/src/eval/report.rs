use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{summarize, HorizonLabel, MetricRow};
use crate::error::{Error, Result};

/// Per-seed rows plus seed-mean summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<MetricRow>,
    #[serde(default)]
    pub summaries: Vec<MetricRow>,
}

impl AblationReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let summaries = summarize(&rows);
        AblationReport { rows, summaries }
    }

    pub fn n_failed(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    pub fn n_succeeded(&self) -> usize {
        self.rows.len() - self.n_failed()
    }

    /// Seed-mean row for `mode` at `horizon`.
    pub fn summary(&self, mode: &str, horizon: HorizonLabel) -> Option<&MetricRow> {
        self.summaries.iter().find(|r| r.mode == mode && r.horizon == horizon)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One line per row: dataset, mode, horizon, seed, mse, mae, n_windows,
    /// trainable_params, error.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record([
            "dataset",
            "mode",
            "horizon",
            "seed",
            "mse",
            "mae",
            "n_windows",
            "trainable_params",
            "error",
        ])
        .map_err(csv_err)?;
        let opt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        for r in self.rows.iter().chain(&self.summaries) {
            w.write_record([
                r.dataset.clone(),
                r.mode.clone(),
                r.horizon.to_string(),
                r.seed.map_or_else(|| "mean".into(), |s| s.to_string()),
                opt(r.mse),
                opt(r.mae),
                r.n_windows.to_string(),
                r.trainable_params.map_or_else(String::new, |p| p.to_string()),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text table of the seed-mean rows: one block per dataset, one
    /// line per horizon (then `avg`), an MSE/MAE column pair per mode.
    pub fn to_table(&self) -> String {
        let rows = if self.summaries.is_empty() {
            &self.rows
        } else {
            &self.summaries
        };
        let mut modes: Vec<&str> = Vec::new();
        let mut datasets: Vec<&str> = Vec::new();
        for r in rows {
            if !modes.contains(&r.mode.as_str()) {
                modes.push(&r.mode);
            }
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>5}", "dataset", "H");
        for m in &modes {
            let _ = write!(out, " | {m:^17}");
        }
        out.push('\n');
        let _ = write!(out, "{:<12} {:>5}", "", "");
        for _ in &modes {
            let _ = write!(out, " | {:>8} {:>8}", "MSE", "MAE");
        }
        out.push('\n');
        let width = out.lines().next().map_or(0, str::len);
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for ds in datasets {
            let mut horizons: Vec<HorizonLabel> = rows
                .iter()
                .filter(|r| r.dataset == ds)
                .map(|r| r.horizon)
                .collect();
            horizons.sort();
            horizons.dedup();
            for (i, h) in horizons.iter().enumerate() {
                let name = if i == 0 { ds } else { "" };
                let _ = write!(out, "{:<12} {:>5}", name, h.to_string());
                for m in &modes {
                    let cell = rows.iter().find(|r| r.dataset == ds && r.mode == *m && r.horizon == *h);
                    match cell {
                        Some(r) if !r.failed() => {
                            let _ = write!(out, " | {:>8.3} {:>8.3}", r.mse, r.mae);
                        }
                        Some(_) => {
                            let _ = write!(out, " | {:>17}", "failed");
                        }
                        None => {
                            let _ = write!(out, " | {:>17}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        let _ = write!(out, "{:<12} {:>5}", "trainable", "");
        for m in &modes {
            let params = rows.iter().find(|r| r.mode == *m).and_then(|r| r.trainable_params);
            match params {
                Some(p) => {
                    let _ = write!(out, " | {p:>17}");
                }
                None => {
                    let _ = write!(out, " | {:>17}", "-");
                }
            }
        }
        out.push('\n');
        out
    }
}

/// Reads a report written by [`AblationReport::to_json`].
pub fn load_report(path: &Path) -> Result<AblationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AblationReport::from_json(&text)
}
