//! `msef`: synthesize data, pretrain the patch encoder, train, evaluate,
//! run ablations and render reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msef::numerics::Precision;

use crate::commands::EvalRequest;
use crate::config::RunConfig;

/// Error carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<msef::Error> for Failure {
    fn from(e: msef::Error) -> Self {
        use msef::Error::*;
        match e {
            Config(_) | InsufficientLength { .. } | MissingHorizon(_) | Parse { .. } | Csv(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "msef", version, about = "Few-shot forecasting with steerable embedding fusion")]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic series as CSV plus a JSON sidecar.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        length: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        channels: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the patch encoder by masked reconstruction.
    Pretrain(RunArgs),
    /// Train one horizon and score it on the test split.
    Train(RunArgs),
    /// Re-score trained checkpoints of a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated horizons (default: the run's horizon).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Append the average over 96, 192, 336 and 720.
        #[arg(long)]
        avg: bool,
        /// Evaluate on another CSV instead of the run's data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the JSON rows (default: RUN/eval.json).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and test every (cell, horizon, seed) of a grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// e.g. full,no_steering,plain
        #[arg(long)]
        modes: Option<String>,
        /// e.g. 1-1,1-2,1-4
        #[arg(long)]
        intervals: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        horizons: Option<String>,
        /// Also write report.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Render a report JSON as a table, CSV or JSON.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by the training commands. Precedence: defaults, then
/// `--config`, then `MSEF_PRECISION`, then the flags below, then `--set`.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// kind:length:channels:seed, instead of --data.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "H", alias = "horizon")]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    few_shot_ratio: Option<f64>,
    /// Steering interval x-y (1-based, inclusive).
    #[arg(long)]
    interval: Option<String>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        if let Ok(p) = std::env::var("MSEF_PRECISION") {
            cfg.set("precision", &p)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("synth", self.synth.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("mode", self.mode.clone()),
            ("horizon", self.horizon.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("few_shot_ratio", self.few_shot_ratio.map(|v| v.to_string())),
            ("interval", self.interval.clone()),
            ("lookback", self.lookback.map(|v| v.to_string())),
            ("max_epochs", self.epochs.map(|v| v.to_string())),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Synth {
            kind,
            length,
            channels,
            seed,
            out,
        } => commands::synth_cmd(&kind, length as usize, channels as usize, seed, &out),
        Command::Pretrain(args) => {
            let cfg = args.resolve(&[])?;
            match cfg.precision()? {
                Precision::F32 => commands::pretrain_cmd::<f32>(&cfg),
                Precision::F64 => commands::pretrain_cmd::<f64>(&cfg),
            }
        }
        Command::Train(args) => {
            let cfg = args.resolve(&[])?;
            match cfg.precision()? {
                Precision::F32 => commands::train_cmd::<f32>(&cfg),
                Precision::F64 => commands::train_cmd::<f64>(&cfg),
            }
        }
        Command::Eval {
            run,
            horizons,
            avg,
            data,
            json,
        } => commands::eval_cmd(&EvalRequest {
            run,
            horizons,
            avg,
            data,
            json,
        }),
        Command::Ablate {
            run,
            modes,
            intervals,
            seeds,
            horizons,
            csv,
        } => {
            // An explicit --intervals without --modes means intervals only.
            let modes = modes.or_else(|| intervals.as_ref().map(|_| "-".to_string()));
            let cfg = run.resolve(&[
                ("modes", modes),
                ("intervals", intervals),
                ("seeds", seeds),
                ("horizons", horizons),
            ])?;
            cfg.cells()?;
            let out = match cfg.precision()? {
                Precision::F32 => commands::ablate_cmd::<f32>(&cfg, csv)?,
                Precision::F64 => commands::ablate_cmd::<f64>(&cfg, csv)?,
            };
            if out.report.n_succeeded() == 0 {
                return Err(Failure::runtime("every ablation cell failed"));
            }
            Ok(())
        }
        Command::Report { input, format, out } => commands::report_cmd(&input, &format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
