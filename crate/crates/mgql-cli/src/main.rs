//! Command line front end for the mgql library.
//!
//! Four subcommands cover the whole workflow:
//!
//! - `simulate`: generate a synthetic observation record from a built-in
//!   model and write it as CSV next to a JSON provenance sidecar;
//! - `estimate`: fit one model to a record and write a JSON report with the
//!   fitted parameters, the stepsize interval, and derived scale estimates;
//! - `select`: score a grid of candidate models on a record, write the full
//!   selection report as JSON and the model-weight matrix as CSV;
//! - `montecarlo`: run a replicated simulation/estimation experiment and
//!   write its aggregate report, per-replication records, and histograms.
//!
//! Every input is a single JSON config document (unknown keys are rejected)
//! and every report is JSON with a `schema_version` field, so runs are
//! reproducible from the config and the seed alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mgql::experiment::{self, ModelSpec};
use mgql::io;
use mgql::model::BuiltinCatalog;
use mgql::simulate::DEFAULT_REFINE;
use mgql::{
    ci_for_h, fit_joint, fit_three_step, fit_two_step, kappa_estimate, residuals, select_joint,
    select_two_step, simulate_path, tau_estimate, CandidateGrid, Criterion, ExperimentConfig,
    FitMode, FitResult, OptimizerConfig, SimulationPlan, StepRule, Strategy,
};

const CLI_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "mgql",
    version,
    about = "Quasi-likelihood estimation for diffusions sampled at an unknown stepsize"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observation record plus a provenance sidecar.
    Simulate {
        /// JSON config: model, n, step_rule, tau, x0, refine, seed.
        #[arg(long)]
        config: PathBuf,
        /// Directory the record is written into (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model to an observation record.
    Estimate {
        /// JSON config: diffusion, drift, mode, optimizer, ci_gamma, h0.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV with header j,x1,...,xd.
        #[arg(long)]
        data: PathBuf,
        /// Directory the report is written into (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score a candidate model grid on an observation record.
    Select {
        /// JSON config: diffusion keys, drift keys, strategy, criterion,
        /// optimizer.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV with header j,x1,...,xd.
        #[arg(long)]
        data: PathBuf,
        /// Directory the reports are written into (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a replicated simulation/estimation experiment.
    Montecarlo {
        /// JSON experiment config (seed, reps, n_list, truth, fit, ...).
        #[arg(long)]
        config: PathBuf,
        /// Overrides out_dir in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the worker count in the config.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Config document for `simulate`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    /// Built-in model keys and the generating parameter.
    model: ModelSpec,
    /// Number of increments; the record has n + 1 states.
    n: usize,
    step_rule: StepRule,
    tau: f64,
    x0: Vec<f64>,
    #[serde(default = "default_refine")]
    refine: usize,
    seed: u64,
    /// File name inside --out; `path.csv` when absent.
    #[serde(default)]
    out_file: Option<String>,
}

/// Config document for `estimate`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    /// Built-in diffusion key, e.g. "diff1".
    diffusion: String,
    /// Built-in drift key, e.g. "drif1".
    drift: String,
    #[serde(default = "default_mode")]
    mode: FitMode,
    #[serde(default)]
    optimizer: OptimizerConfig,
    /// Nominal miscoverage of the reported stepsize interval.
    #[serde(default = "default_ci_gamma")]
    ci_gamma: f64,
    /// Known sampling stepsize; enables the time-scale estimate tau~ = h~/h0.
    #[serde(default)]
    h0: Option<f64>,
}

/// Config document for `select`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    /// Built-in diffusion candidate keys (grid columns).
    diffusion: Vec<String>,
    /// Built-in drift candidate keys (grid rows).
    drift: Vec<String>,
    #[serde(default = "default_strategy")]
    strategy: Strategy,
    /// Criterion that picks the winner; both tables are always reported.
    #[serde(default = "default_criterion")]
    criterion: Criterion,
    #[serde(default)]
    optimizer: OptimizerConfig,
}

fn default_schema() -> u32 {
    CLI_SCHEMA_VERSION
}

fn default_refine() -> usize {
    DEFAULT_REFINE
}

fn default_mode() -> FitMode {
    FitMode::TwoStep
}

fn default_ci_gamma() -> f64 {
    0.05
}

fn default_strategy() -> Strategy {
    Strategy::Joint
}

fn default_criterion() -> Criterion {
    Criterion::MBic
}

/// Two-sided interval for the effective stepsize h.
#[derive(Debug, Serialize)]
struct IntervalReport {
    gamma: f64,
    lower: f64,
    upper: f64,
}

/// A derived scalar with its delta-method standard error.
#[derive(Debug, Serialize)]
struct DerivedScalar {
    estimate: f64,
    stderr: f64,
}

/// Time-scale estimate for a user-supplied true stepsize.
#[derive(Debug, Serialize)]
struct TauReport {
    h0: f64,
    estimate: f64,
    stderr: f64,
}

/// Moments of the standardized residuals; near (0, 1) under a good fit.
#[derive(Debug, Serialize)]
struct ResidualSummary {
    count: usize,
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
}

/// Everything `estimate` writes: the fit itself plus the derived quantities
/// that need the plug-in covariance.
#[derive(Debug, Serialize)]
struct EstimateReport {
    schema_version: u32,
    data_file: String,
    fit: FitResult,
    h_interval: Option<IntervalReport>,
    /// Sampling-rate exponent kappa~ = -log h~ / log n.
    kappa: Option<DerivedScalar>,
    tau: Option<TauReport>,
    residual_summary: ResidualSummary,
    warnings: Vec<String>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Estimate { config, data, out } => cmd_estimate(&config, &data, &out),
        Command::Select { config, data, out } => cmd_select(&config, &data, &out),
        Command::Montecarlo {
            config,
            out,
            threads,
            seed,
        } => cmd_montecarlo(&config, out, threads, seed),
    }
}

fn load_config<T: serde::de::DeserializeOwned>(file: &Path) -> anyhow::Result<T> {
    io::read_json(file).with_context(|| format!("reading config {}", file.display()))
}

fn check_schema(what: &str, got: u32) -> anyhow::Result<()> {
    anyhow::ensure!(
        got == CLI_SCHEMA_VERSION,
        "{what} config has schema_version {got}, this binary expects {CLI_SCHEMA_VERSION}"
    );
    Ok(())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg: SimulateConfig = load_config(config)?;
    check_schema("simulate", cfg.schema_version)?;
    let (model, theta) = cfg.model.build()?;
    let plan = SimulationPlan::new(cfg.n, cfg.step_rule, cfg.tau, cfg.x0.clone())?
        .with_refine(cfg.refine)?;
    let seed = seed.unwrap_or(cfg.seed);
    let path = simulate_path(&model, &theta, &plan, seed)?;

    ensure_dir(out)?;
    let file = out.join(cfg.out_file.as_deref().unwrap_or("path.csv"));
    io::write_path_csv(&path, &file)?;
    println!("wrote {}", file.display());
    println!("wrote {}", io::meta_sidecar(&file).display());
    Ok(())
}

fn cmd_estimate(config: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg: EstimateConfig = load_config(config)?;
    check_schema("estimate", cfg.schema_version)?;
    let model = BuiltinCatalog::model(&cfg.diffusion, &cfg.drift)?;
    let path = io::read_path_csv(data).with_context(|| format!("reading {}", data.display()))?;

    let fit = match cfg.mode {
        FitMode::Joint => fit_joint(&path, &model, &cfg.optimizer)?,
        FitMode::TwoStep => fit_two_step(&path, &model, &cfg.optimizer)?,
        FitMode::ThreeStep => fit_three_step(&path, &model, &cfg.optimizer)?,
    };

    let mut warnings = Vec::new();
    let (h_interval, kappa, tau) = if fit.cov.is_some() {
        let (lower, upper) = ci_for_h(&fit, cfg.ci_gamma)?;
        let (k, k_se) = kappa_estimate(&fit)?;
        let tau = match cfg.h0 {
            Some(h0) => {
                let (t, t_se) = tau_estimate(&fit, h0)?;
                Some(TauReport {
                    h0,
                    estimate: t,
                    stderr: t_se,
                })
            }
            None => None,
        };
        (
            Some(IntervalReport {
                gamma: cfg.ci_gamma,
                lower,
                upper,
            }),
            Some(DerivedScalar {
                estimate: k,
                stderr: k_se,
            }),
            tau,
        )
    } else {
        warnings.push(
            "no covariance report on the fit; interval and derived scales omitted".to_string(),
        );
        (None, None, None)
    };

    let eps = residuals(&path, &model, &fit)?;
    let report = EstimateReport {
        schema_version: CLI_SCHEMA_VERSION,
        data_file: data.display().to_string(),
        fit,
        h_interval,
        kappa,
        tau,
        residual_summary: summarize_residuals(&eps),
        warnings,
    };

    ensure_dir(out)?;
    let file = out.join("estimate.json");
    io::write_json(&report, &file)?;
    println!("wrote {}", file.display());
    Ok(())
}

fn cmd_select(config: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg: SelectConfig = load_config(config)?;
    check_schema("select", cfg.schema_version)?;
    let m1: Vec<&str> = cfg.diffusion.iter().map(String::as_str).collect();
    let m2: Vec<&str> = cfg.drift.iter().map(String::as_str).collect();
    let grid = CandidateGrid::builtin(&m1, &m2, cfg.optimizer.clone())?;
    let path = io::read_path_csv(data).with_context(|| format!("reading {}", data.display()))?;

    let report = match cfg.strategy {
        Strategy::Joint => select_joint(&path, &grid, cfg.criterion)?,
        Strategy::TwoStep => select_two_step(&path, &grid, cfg.criterion)?,
    };

    ensure_dir(out)?;
    let json = out.join("selection.json");
    let csv = out.join("weights.csv");
    io::write_json(&report, &json)?;
    io::write_weights_csv(&report, &csv)?;
    println!("wrote {}", json.display());
    println!("wrote {}", csv.display());
    let (i, j) = report.selected;
    println!("selected {} + {}", report.m1_labels[i], report.m2_labels[j]);
    Ok(())
}

fn cmd_montecarlo(
    config: &Path,
    out: Option<PathBuf>,
    threads: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = Some(t);
    }
    if let Some(dir) = out {
        cfg.out_dir = Some(dir.display().to_string());
    }
    let dir = PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| ".".to_string()));

    let output = experiment::run_montecarlo(&cfg)?;
    ensure_dir(&dir)?;
    let files = experiment::write_artifacts(&output, &dir)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    for s in &output.report.estimation {
        if s.failures > 0 {
            println!(
                "note: {} of {} replications failed at n = {} ({:?})",
                s.failures, s.reps, s.n, s.mode
            );
        }
    }
    Ok(())
}

fn summarize_residuals(eps: &[f64]) -> ResidualSummary {
    let count = eps.len();
    if count == 0 {
        return ResidualSummary {
            count,
            mean: 0.0,
            sd: 0.0,
            min: 0.0,
            max: 0.0,
        };
    }
    let mean = eps.iter().sum::<f64>() / count as f64;
    let var = if count > 1 {
        eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (count as f64 - 1.0)
    } else {
        0.0
    };
    ResidualSummary {
        count,
        mean,
        sd: var.sqrt(),
        min: eps.iter().copied().fold(f64::INFINITY, f64::min),
        max: eps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}
