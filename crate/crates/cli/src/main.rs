//! `tsbayes`: fit, select, forecast and compare Bayesian time-series models
//! from the command line.
//!
//! Exit codes: 0 success, 2 bad input (arguments, config, data,
//! incomparable fits), 3 sampler failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsbayes::series::Column;

use crate::commands::{AutoArgs, ForecastArgs, Method};
use crate::config::SamplerOverrides;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tsbayes", version, about = "Bayesian SARIMA and GARCH models fitted with NUTS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model described by a JSON config and write a fit directory.
    Fit {
        config: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select a SARIMA order by stepwise BIC search, then fit it.
    Auto {
        /// CSV file holding the series.
        #[arg(long)]
        data: PathBuf,
        /// Column name, or zero-based index.
        #[arg(long, default_value = "0")]
        column: String,
        /// Observations per seasonal cycle.
        #[arg(long, default_value_t = 1)]
        frequency: usize,
        /// The CSV has no header row.
        #[arg(long)]
        no_header: bool,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
        /// Also print the candidate log as CSV on stdout.
        #[arg(long)]
        trace: bool,
        /// Search criterion; only BIC is supported.
        #[arg(long, value_enum, default_value_t = Criterion::Bic)]
        criterion: Criterion,
    },
    /// Posterior predictive forecasts from a fit directory.
    Forecast {
        fit_dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        /// Defaults to the seed of the fit.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "forecast")]
        out: PathBuf,
        /// Also write every predictive draw.
        #[arg(long)]
        draws: bool,
        /// CSV with future values of the fit's named regressors.
        #[arg(long)]
        future_xreg: Option<PathBuf>,
    },
    /// Compare fit directories.
    Compare {
        #[arg(required = true, num_args = 1..)]
        fit_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Loo)]
        method: Method,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Criterion {
    Bic,
}

#[derive(Debug, Args)]
struct SamplerFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain including warmup.
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    adapt_delta: Option<f64>,
}

impl From<SamplerFlags> for SamplerOverrides {
    fn from(f: SamplerFlags) -> Self {
        SamplerOverrides {
            chains: f.chains,
            iter: f.iter,
            warmup: f.warmup,
            adapt_delta: f.adapt_delta,
            seed: f.seed,
        }
    }
}

fn parse_column(s: &str) -> Column {
    s.parse().map_or_else(|_| Column::Name(s.to_string()), Column::Index)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { config, sampler, out } => commands::fit(&config, &sampler.into(), out),
        Command::Auto { data, column, frequency, no_header, sampler, out, trace, criterion: _ } => {
            let args = AutoArgs { data, column: parse_column(&column), frequency, header: !no_header, out, trace };
            commands::auto(&args, &sampler.into())
        }
        Command::Forecast { fit_dir, horizon, seed, out, draws, future_xreg } => {
            commands::forecast(&ForecastArgs { fit_dir, horizon, seed, out, draws, future_xreg })
        }
        Command::Compare { fit_dirs, method } => {
            print!("{}", commands::compare(&fit_dirs, method)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
