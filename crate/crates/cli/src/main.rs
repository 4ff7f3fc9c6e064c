//! Command-line front end for the sensor-network calibration pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

const AFTER_HELP: &str = "\
Pipeline: ingest (or simulate) -> fit -> calibrate -> predict / diagnose / evaluate.
Every output directory receives the effective config.toml; rerunning with
--config <dir>/config.toml reproduces the outputs byte for byte.
File formats are described in FORMATS.md.
Errors print one line `error: <kind>: <message>` and exit 1; usage errors exit 2.";

#[derive(Parser, Debug)]
#[command(name = "airfuse", version, about = "Calibrate a dense low-cost sensor network against sparse reference stations", after_help = AFTER_HELP)]
struct Cli {
    /// TOML run configuration (defaults for any missing key).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Raw CSV records (device,time,lon,lat,pm25) -> hourly panel directory.
    Ingest {
        #[arg(long, required = true, num_args = 1..)]
        airbox: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        epa: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic panel directory, colocated sensor series and truth files.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-hour trend and covariance fits plus the sensor noise law.
    Fit {
        /// Panel directory from ingest or simulate.
        #[arg(long)]
        series: PathBuf,
        /// Colocated sensor CSV used to estimate the noise law.
        #[arg(long)]
        colocated: Option<PathBuf>,
        /// Existing noise law file to reuse instead.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Global or spatially adaptive calibration field.
    Calibrate {
        #[arg(long)]
        series: PathBuf,
        /// Output directory of `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// global | adaptive
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gridded predictions with variances, one CSV and SVG per hour.
    Predict {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Output directory of `calibrate` (not needed for --method hidden).
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Hour to predict (hours since the epoch or ISO timestamp); repeatable. Default: every fitted hour.
        #[arg(long)]
        hour: Vec<String>,
        /// hidden | airbox | fused
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standardized sensor residuals and per-site summaries.
    Diagnose {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Adds reference rows to the system when given.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated hold-out comparison of methods M1-M6 per month.
    Evaluate {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated subset, e.g. M1,M2,M4.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference stations against nearest sensor and neighbourhood mean.
    Explore {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.apply_seed();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    match &cli.command {
        Command::Ingest { airbox, epa, out } => commands::ingest(&cfg, airbox, epa, out),
        Command::Simulate { out } => commands::simulate_cmd(&cfg, out),
        Command::Fit {
            series,
            colocated,
            noise,
            out,
        } => commands::fit(&cfg, series, colocated.as_deref(), noise.as_deref(), out),
        Command::Calibrate { series, fit, mode, out } => commands::calibrate(&cfg, series, fit, mode.as_deref(), out),
        Command::Predict {
            series,
            fit,
            calibration,
            hour,
            method,
            out,
        } => commands::predict(&cfg, series, fit, calibration.as_deref(), hour, method.as_deref(), out),
        Command::Diagnose {
            series,
            fit,
            calibration,
            out,
        } => commands::diagnose(&cfg, series, fit, calibration.as_deref(), out),
        Command::Evaluate {
            series,
            fit,
            reps,
            methods,
            out,
        } => commands::evaluate(&cfg, series, fit, *reps, methods.as_deref(), out),
        Command::Explore { series, radius, out } => commands::explore_cmd(&cfg, series, *radius, out),
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(a) = cause.downcast_ref::<airfuse::Error>() {
            return a.kind();
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<rayon::ThreadPoolBuildError>() {
            return "threads";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}: {}", kind(&e), msg.join(": ").replace(['\n', '\r'], " "));
            ExitCode::from(1)
        }
    }
}
