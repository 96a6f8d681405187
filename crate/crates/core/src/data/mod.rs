//! Series ingestion, train/val/test splits, few-shot truncation and
//! sliding windows.

mod synth;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synth::{
    synth, write_csv, write_sidecar, ArmaParams, PiecewiseParams, SinMixParams, SynthKind,
};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// A multichannel series, channels as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub timestamps: Option<Vec<String>>,
    /// `N × T_total`.
    pub values: Tensor<f64>,
    pub channel_names: Vec<String>,
    /// Generator description for synthetic series.
    pub metadata: Option<serde_json::Value>,
}

impl RawSeries {
    pub fn n_channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

const DATE_HEADERS: [&str; 4] = ["date", "timestamp", "time", "datetime"];

/// Reads a headed CSV. A first column named like a date is kept as
/// timestamps; every other column is a channel and must parse as a float.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    read_csv(file, &name)
}

/// [`load_csv`] over any reader.
pub fn read_csv(reader: impl std::io::Read, name: &str) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Empty("csv header"));
    }
    let has_date = DATE_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str());
    let first = usize::from(has_date);
    let channel_names = headers[first..].to_vec();
    if channel_names.is_empty() {
        return Err(Error::Csv("no numeric columns".into()));
    }
    let mut columns = vec![Vec::new(); channel_names.len()];
    let mut stamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Data rows are numbered from 1, the header being row 0.
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv(format!("row {row}: {e}")))?;
        if has_date {
            stamps.push(rec[0].to_string());
        }
        for (c, cell) in rec.iter().skip(first).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + first + 1,
                name: channel_names[c].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + first + 1,
                    name: channel_names[c].clone(),
                    value: cell.to_string(),
                });
            }
            columns[c].push(v);
        }
    }
    let len = columns[0].len();
    if len == 0 {
        return Err(Error::Empty("csv data rows"));
    }
    let values = Tensor::new([channel_names.len(), len], columns.concat())?;
    Ok(RawSeries {
        name: name.to_string(),
        timestamps: has_date.then_some(stamps),
        values,
        channel_names,
        metadata: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Fractions of the whole series; the validation part takes the remainder.
    Ratio { train: f64, test: f64 },
    /// 12/4/4 months of hourly data.
    EttHourly,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Ratio {
            train: 0.7,
            test: 0.2,
        }
    }
}

impl SplitScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(SplitScheme::default()),
            "ett_hourly" => Ok(SplitScheme::EttHourly),
            "ett_minute" => Ok(SplitScheme::EttMinute),
            other => Err(Error::Config(format!(
                "unknown split scheme {other:?} (expected ratio, ett_hourly or ett_minute)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitScheme::Ratio { .. } => "ratio",
            SplitScheme::EttHourly => "ett_hourly",
            SplitScheme::EttMinute => "ett_minute",
        }
    }
}

/// Contiguous, ordered index ranges over the time axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// Leading part of `train` that training windows may use.
    pub few_shot: Range<usize>,
}

const HOURS_PER_MONTH: usize = 30 * 24;

fn floor_frac(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Deterministic split boundaries plus the few-shot prefix of the train range.
pub fn make_splits(total_len: usize, scheme: SplitScheme, few_shot_ratio: f64) -> Result<SplitSpec> {
    if !(few_shot_ratio > 0.0 && few_shot_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "few_shot_ratio must lie in (0, 1], got {few_shot_ratio}"
        )));
    }
    let (n_train, n_val, n_test) = match scheme {
        SplitScheme::Ratio { train, test } => {
            if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                return Err(Error::Config(format!(
                    "ratio split needs train, test > 0 and train + test < 1, got {train}/{test}"
                )));
            }
            let a = floor_frac(train, total_len);
            let c = floor_frac(test, total_len);
            (a, total_len - a - c, c)
        }
        SplitScheme::EttHourly | SplitScheme::EttMinute => {
            let per_month = if scheme == SplitScheme::EttHourly {
                HOURS_PER_MONTH
            } else {
                4 * HOURS_PER_MONTH
            };
            let need = 20 * per_month;
            if total_len < need {
                return Err(Error::InsufficientLength {
                    need,
                    have: total_len,
                });
            }
            (12 * per_month, 4 * per_month, 4 * per_month)
        }
    };
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InsufficientLength {
            need: 3,
            have: total_len,
        });
    }
    let train = 0..n_train;
    let val = n_train..n_train + n_val;
    let test = val.end..val.end + n_test;
    let few_shot = 0..floor_frac(few_shot_ratio, n_train);
    Ok(SplitSpec {
        train,
        val,
        test,
        few_shot,
    })
}

impl SplitSpec {
    /// Checks that every part can host at least one window.
    pub fn check_capacity(&self, lookback: usize, horizon: usize) -> Result<()> {
        let fs = self.few_shot.len();
        if fs < lookback + horizon {
            return Err(Error::InsufficientLength {
                need: lookback + horizon,
                have: fs,
            });
        }
        for r in [&self.val, &self.test] {
            if r.len() < horizon || r.end < lookback + horizon {
                return Err(Error::InsufficientLength {
                    need: horizon,
                    have: r.len(),
                });
            }
        }
        Ok(())
    }
}

/// One input/target pair; `y` starts at `start + T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow<T = f32> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub start: usize,
}

impl<T: Real> ForecastWindow<T> {
    pub fn target_start(&self) -> usize {
        self.start + self.x.cols()
    }
}

fn slice_window<T: Real>(series: &RawSeries, start: usize, lookback: usize, horizon: usize) -> Result<ForecastWindow<T>> {
    let n = series.n_channels();
    let mut x = Vec::with_capacity(n * lookback);
    let mut y = Vec::with_capacity(n * horizon);
    for c in 0..n {
        let ch = series.channel(c);
        x.extend(ch[start..start + lookback].iter().map(|&v| T::lit(v)));
        y.extend(ch[start + lookback..start + lookback + horizon].iter().map(|&v| T::lit(v)));
    }
    Ok(ForecastWindow {
        x: Tensor::new([n, lookback], x)?,
        y: Tensor::new([n, horizon], y)?,
        start,
    })
}

/// Windows lying entirely inside `range`, every `stride` steps.
pub fn make_windows<T: Real>(
    series: &RawSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow<T>>> {
    check_window_args(series, &range, lookback, horizon, stride)?;
    let need = lookback + horizon;
    if range.len() < need {
        return Err(Error::InsufficientLength {
            need,
            have: range.len(),
        });
    }
    (range.start..=range.end - need)
        .step_by(stride)
        .map(|s| slice_window(series, s, lookback, horizon))
        .collect()
}

/// Windows whose targets lie inside `range`; inputs may reach back before
/// `range.start`.
pub fn make_eval_windows<T: Real>(
    series: &RawSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow<T>>> {
    check_window_args(series, &range, lookback, horizon, stride)?;
    let first_target = range.start.max(lookback);
    if range.end < first_target + horizon {
        return Err(Error::InsufficientLength {
            need: first_target + horizon - range.start,
            have: range.len(),
        });
    }
    (first_target - lookback..=range.end - horizon - lookback)
        .step_by(stride)
        .map(|s| slice_window(series, s, lookback, horizon))
        .collect()
}

fn check_window_args(
    series: &RawSeries,
    range: &Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<()> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("lookback, horizon and stride must be positive".into()));
    }
    if range.start > range.end || range.end > series.len() {
        return Err(Error::Config(format!(
            "window range {range:?} outside series of length {}",
            series.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, channels: usize) -> RawSeries {
        let data = (0..channels)
            .flat_map(|c| (0..len).map(move |t| (c * 10_000 + t) as f64))
            .collect();
        RawSeries {
            name: "ramp".into(),
            timestamps: None,
            values: Tensor::new([channels, len], data).unwrap(),
            channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
            metadata: None,
        }
    }

    #[test]
    fn small_csv() {
        let s = read_csv("a,b\n1,2\n3,4\n5,6\n".as_bytes(), "toy").unwrap();
        assert_eq!(s.values.shape(), &[2, 3]);
        assert_eq!(s.channel(1), &[2.0, 4.0, 6.0]);
        assert!(s.timestamps.is_none());
    }

    #[test]
    fn ett_header() {
        let csv = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n2016-07-01 00:00:00,5.8,2.1,1.5,1.2,4.2,1.3,30.5\n";
        let s = read_csv(csv.as_bytes(), "ETTh1").unwrap();
        assert_eq!(s.n_channels(), 7);
        assert_eq!(s.channel_names[6], "OT");
        assert_eq!(s.timestamps.unwrap()[0], "2016-07-01 00:00:00");
    }

    #[test]
    fn bad_cells_are_located() {
        let err = read_csv("a,b\n1,2\n3,n/a\n".as_bytes(), "toy").unwrap_err();
        match err {
            Error::Parse { row, column, name, value } => {
                assert_eq!((row, column, name.as_str(), value.as_str()), (2, 2, "b", "n/a"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_csv("a,b\n1,2\n3\n".as_bytes(), "toy").is_err());
        assert!(read_csv("a,b\n".as_bytes(), "toy").is_err());
        assert!(read_csv("".as_bytes(), "toy").is_err());
        assert!(read_csv("a\n1\n\n".as_bytes(), "toy").is_ok());
        assert!(read_csv("a\nNaN\n".as_bytes(), "toy").is_err());
    }

    #[test]
    fn ratio_split_arithmetic() {
        let s = make_splits(1000, SplitScheme::default(), 0.10).unwrap();
        assert_eq!((s.train, s.val, s.test, s.few_shot), (0..700, 700..800, 800..1000, 0..70));
        let full = make_splits(1000, SplitScheme::default(), 1.0).unwrap();
        assert_eq!(full.few_shot, full.train);
        assert!(make_splits(1000, SplitScheme::default(), 0.0).is_err());
    }

    #[test]
    fn ett_splits() {
        let h = make_splits(17_420, SplitScheme::EttHourly, 0.1).unwrap();
        assert_eq!((h.train.end, h.val.end, h.test.end), (8640, 11_520, 14_400));
        let m = make_splits(69_680, SplitScheme::EttMinute, 0.1).unwrap();
        assert_eq!(m.train.end, 34_560);
        assert!(make_splits(14_399, SplitScheme::EttHourly, 0.1).is_err());
    }

    #[test]
    fn window_counts() {
        let s = ramp(200, 2);
        assert_eq!(make_windows::<f64>(&s, 0..12, 8, 4, 1).unwrap().len(), 1);
        let w = make_windows::<f64>(&s, 10..26, 8, 4, 1).unwrap();
        assert_eq!(w.len(), 5);
        let last = w.last().unwrap();
        assert_eq!(last.y.row(0).last(), Some(&25.0));
        assert_eq!(last.y.row(1)[0], 10_000.0 + last.target_start() as f64);
        assert_eq!(make_windows::<f64>(&s, 0..100, 8, 4, 10).unwrap().len(), 9);
        assert!(matches!(
            make_windows::<f64>(&s, 0..11, 8, 4, 1),
            Err(Error::InsufficientLength { need: 12, have: 11 })
        ));
    }

    #[test]
    fn eval_windows_look_back() {
        let s = ramp(200, 1);
        let w = make_eval_windows::<f64>(&s, 100..120, 30, 5, 1).unwrap();
        assert_eq!(w.len(), 16);
        assert_eq!(w[0].start, 70);
        assert_eq!(w[0].target_start(), 100);
        assert_eq!(w.last().unwrap().y.row(0).last(), Some(&119.0));
    }
}
