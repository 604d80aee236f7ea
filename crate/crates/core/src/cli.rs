//! Command-line front end: configuration merging, CSV tables and run
//! manifests.

use crate::harness::{run_mse_vs_iterations, run_mse_vs_snr, ExperimentSpec, MseRecord};
use crate::selfcheck::{self, CheckOutcome, Rules};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "twrn-em", version, about = "Semi-blind EM channel estimation for AF two-way relay networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Total MSE of LS and EM versus SNR
    #[command(name = "mse-vs-snr")]
    MseVsSnr(RunArgs),
    /// EM total MSE versus iteration count
    #[command(name = "mse-vs-iters")]
    MseVsIters(RunArgs),
    /// Run the oracle-backed invariant checks
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Flags shared by the experiment commands. Unset flags fall back to the
/// config file, then to the command's defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat TOML file with experiment settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte-Carlo trials per operating point
    #[arg(long)]
    pub trials: Option<usize>,
    /// SNR grid in dB, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr: Option<Vec<f64>>,
    /// Modulation orders, comma separated (4, 16, 64)
    #[arg(long = "mod-orders", value_delimiter = ',')]
    pub mod_orders: Option<Vec<usize>>,
    /// Data block lengths, comma separated
    #[arg(long = "n-data", value_delimiter = ',')]
    pub n_data: Option<Vec<usize>>,
    /// Pilot length L (even)
    #[arg(long)]
    pub pilots: Option<usize>,
    #[arg(long = "em-iters")]
    pub em_iters: Option<usize>,
    /// Output CSV path; the manifest is written next to it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run trials on a single thread
    #[arg(long)]
    pub serial: bool,
}

/// Keys accepted in a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub snr: Option<Vec<f64>>,
    pub mod_orders: Option<Vec<usize>>,
    pub n_data: Option<Vec<usize>>,
    pub pilots: Option<usize>,
    pub em_iters: Option<usize>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub pr: Option<f64>,
    pub parallel: Option<bool>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Invalid(#[from] crate::Error),
    #[error("cannot serialize manifest: {0}")]
    Manifest(String),
}

/// Which experiment a spec is being built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    MseVsSnr,
    MseVsIters,
}

impl Experiment {
    pub fn defaults(self) -> ExperimentSpec {
        match self {
            Experiment::MseVsSnr => ExperimentSpec::default(),
            Experiment::MseVsIters => ExperimentSpec::convergence_defaults(),
        }
    }

    fn default_out(self) -> &'static str {
        match self {
            Experiment::MseVsSnr => "mse_vs_snr.csv",
            Experiment::MseVsIters => "mse_vs_iters.csv",
        }
    }
}

pub fn read_config_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.into(), source })?;
    toml::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), message: e.message().to_string() })
}

/// Build the experiment spec: command defaults, then the config file, then
/// flags.
pub fn parse_config(experiment: Experiment, args: &RunArgs) -> Result<ExperimentSpec, CliError> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => ConfigFile::default(),
    };
    let mut spec = experiment.defaults();
    macro_rules! layer {
        ($field:ident <- $file_key:ident, $flag:expr) => {
            if let Some(v) = file.$file_key.clone() {
                spec.$field = v;
            }
            if let Some(v) = $flag.clone() {
                spec.$field = v;
            }
        };
    }
    layer!(seed <- seed, args.seed);
    layer!(trials <- trials, args.trials);
    layer!(snr_grid_db <- snr, args.snr);
    layer!(mod_orders <- mod_orders, args.mod_orders);
    layer!(n_values <- n_data, args.n_data);
    layer!(pilot_len <- pilots, args.pilots);
    layer!(em_iters <- em_iters, args.em_iters);
    layer!(p1 <- p1, None::<f64>);
    layer!(p2 <- p2, None::<f64>);
    layer!(pr <- pr, None::<f64>);
    layer!(parallel <- parallel, None::<bool>);
    if args.serial {
        spec.parallel = false;
    }
    spec.validate()?;
    Ok(spec)
}

/// Record of one command invocation, written next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Experiment,
    pub version: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub clamp_flags: usize,
    pub excluded_trials: usize,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub spec: ExperimentSpec,
}

impl RunManifest {
    pub fn to_text(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Manifest(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Manifest(e.to_string()))
    }
}

/// Twelve significant digits in scientific notation; locale independent.
pub fn format_real(x: f64) -> String {
    format!("{x:.11e}")
}

pub const SNR_HEADER: &str = "snr_db,M,N,iterations,mse_em,mse_ls,trials,clamp_flags";
pub const ITERS_HEADER: &str = "iteration,M,N,snr_db,mse_em,trials";

pub fn snr_csv(records: &[MseRecord]) -> String {
    let mut out = String::from(SNR_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            format_real(r.snr_db),
            r.order,
            r.data_len,
            r.iteration,
            format_real(r.mse_em),
            format_real(r.mse_ls),
            r.trials,
            r.clamp_flags
        );
    }
    out
}

pub fn iterations_csv(records: &[MseRecord]) -> String {
    let mut out = String::from(ITERS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.order,
            r.data_len,
            format_real(r.snr_db),
            format_real(r.mse_em),
            r.trials
        );
    }
    out
}

pub fn manifest_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.toml")
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Write { path: path.into(), source })
}

fn run_experiment(
    experiment: Experiment,
    spec: &ExperimentSpec,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let (records, csv) = match experiment {
        Experiment::MseVsSnr => {
            let records = run_mse_vs_snr(spec)?;
            let csv = snr_csv(&records);
            (records, csv)
        }
        Experiment::MseVsIters => {
            let records = run_mse_vs_iterations(spec)?;
            let csv = iterations_csv(&records);
            (records, csv)
        }
    };
    write_file(out, &csv)?;

    // Per-cell counters repeat on every iteration row; count each cell once.
    let cells = records.iter().filter(|r| r.iteration == spec.em_iters);
    let (clamp_flags, excluded_trials) = cells.fold((0, 0), |(c, e), r| (c + r.clamp_flags, e + r.excluded));
    let manifest = RunManifest {
        command: experiment,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: spec.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        clamp_flags,
        excluded_trials,
        csv_path: out.to_path_buf(),
        manifest_path: manifest_path_for(out),
        spec: spec.clone(),
    };
    write_file(&manifest.manifest_path, &manifest.to_text()?)?;
    Ok(manifest)
}

pub fn cmd_mse_vs_snr(spec: &ExperimentSpec, out: &Path) -> Result<RunManifest, CliError> {
    run_experiment(Experiment::MseVsSnr, spec, out)
}

pub fn cmd_mse_vs_iterations(spec: &ExperimentSpec, out: &Path) -> Result<RunManifest, CliError> {
    run_experiment(Experiment::MseVsIters, spec, out)
}

/// Run the invariant suite; the flag is true when every check passed.
pub fn cmd_selfcheck(rules: &Rules, seed: u64) -> Result<(Vec<CheckOutcome>, bool), CliError> {
    let outcomes = selfcheck::run_all(rules, seed)?;
    let passed = outcomes.iter().all(|o| o.passed);
    Ok((outcomes, passed))
}

/// Dispatch a parsed command line. Returns whether the command succeeded.
pub fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::MseVsSnr(args) => run_with_args(Experiment::MseVsSnr, &args),
        Command::MseVsIters(args) => run_with_args(Experiment::MseVsIters, &args),
        Command::Selfcheck { seed } => {
            let (outcomes, passed) = cmd_selfcheck(&Rules::default(), seed)?;
            for outcome in &outcomes {
                println!("{outcome}");
            }
            Ok(passed)
        }
    }
}

fn run_with_args(experiment: Experiment, args: &RunArgs) -> Result<bool, CliError> {
    let spec = parse_config(experiment, args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(experiment.default_out()));
    let manifest = run_experiment(experiment, &spec, &out)?;
    println!(
        "wrote {} and {} ({:.2}s, {} clamp flags, {} excluded trials)",
        manifest.csv_path.display(),
        manifest.manifest_path.display(),
        manifest.wall_time_secs,
        manifest.clamp_flags,
        manifest.excluded_trials
    );
    Ok(true)
}
