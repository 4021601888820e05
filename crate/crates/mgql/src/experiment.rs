//! Monte Carlo experiment harness: repeated simulation + estimation and/or
//! model selection from a single JSON-serializable configuration, with
//! deterministic per-replication seeds, aggregate tables, and plot-ready
//! histogram data.
//!
//! Seed layout: replication r at sample-size index i simulates its path with
//! seed `seed + i * reps + r`; selection replications use the same rule
//! offset by `n_list.len() * reps` so the two studies never share a path.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{
    ci_for_h, fit_joint, fit_three_step, fit_two_step, standardized_estimates, FitMode, FitResult,
    OptimizerConfig,
};
use crate::io::write_json;
use crate::model::{BuiltinCatalog, DiffusionModel, Theta};
use crate::select::{consistency_experiment, CandidateGrid, ConsistencyRow, Criterion, Strategy};
use crate::simulate::{simulate_path, SimulationPlan, StepRule};
use crate::util::csum;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
const HISTOGRAM_BINS: usize = 40;
const HISTOGRAM_RANGE: (f64, f64) = (-4.0, 4.0);
/// Residual histograms pool replications until this many values are binned.
const RESIDUAL_POOL_CAP: usize = 100_000;

/// Builtin model reference with a parameter value: the simulation truth, or
/// the model to fit together with its reference value theta0 (used for
/// studentized deviations and coverage targets).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub diffusion: String,
    pub drift: String,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<(DiffusionModel, Theta)> {
        let model = BuiltinCatalog::model(&self.diffusion, &self.drift)?;
        let theta = Theta::new(self.alpha.clone(), self.beta.clone());
        model.check_theta(&theta)?;
        Ok((model, theta))
    }
}

/// Candidate grid plus strategy for the selection study.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub diffusion_keys: Vec<String>,
    pub drift_keys: Vec<String>,
    pub strategy: Strategy,
    pub criterion: Criterion,
    /// Key pair of the data-generating candidate inside the grid.
    pub true_diffusion: String,
    pub true_drift: String,
}

impl SelectionSpec {
    fn grid(&self, optimizer: &OptimizerConfig) -> Result<CandidateGrid> {
        let dks: Vec<&str> = self.diffusion_keys.iter().map(|s| s.as_str()).collect();
        let rks: Vec<&str> = self.drift_keys.iter().map(|s| s.as_str()).collect();
        CandidateGrid::builtin(&dks, &rks, optimizer.clone())
    }

    fn true_cell(&self) -> Result<(usize, usize)> {
        let m1 = self
            .diffusion_keys
            .iter()
            .position(|k| k == &self.true_diffusion)
            .ok_or_else(|| Error::invalid("true diffusion key missing from the grid"))?;
        let m2 = self
            .drift_keys
            .iter()
            .position(|k| k == &self.true_drift)
            .ok_or_else(|| Error::invalid("true drift key missing from the grid"))?;
        Ok((m1, m2))
    }
}

fn default_refine() -> usize {
    crate::simulate::DEFAULT_REFINE
}

fn default_modes() -> Vec<FitMode> {
    vec![FitMode::Joint, FitMode::TwoStep]
}

fn default_ci_gamma() -> f64 {
    0.05
}

fn default_schema() -> u32 {
    EXPERIMENT_SCHEMA_VERSION
}

/// One JSON document drives a whole experiment. Unknown keys are rejected to
/// keep configurations honest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Master seed; every replication seed derives from it.
    pub seed: u64,
    /// Replications per sample size.
    pub reps: usize,
    /// Sample sizes to sweep.
    pub n_list: Vec<usize>,
    /// Data-generating model and parameter.
    pub truth: ModelSpec,
    /// Model to estimate with its reference value; the truth when absent.
    #[serde(default)]
    pub fit: Option<ModelSpec>,
    /// Estimation modes to run; empty list disables the estimation study.
    #[serde(default = "default_modes")]
    pub modes: Vec<FitMode>,
    pub tau: f64,
    pub step_rule: StepRule,
    pub x0: Vec<f64>,
    #[serde(default = "default_refine")]
    pub refine: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Nominal miscoverage of the reported h interval.
    #[serde(default = "default_ci_gamma")]
    pub ci_gamma: f64,
    /// Selection study; absent disables it.
    #[serde(default)]
    pub selection: Option<SelectionSpec>,
    /// Rayon worker count; library default when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Output directory for artifact writers; cwd-relative.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {EXPERIMENT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.reps == 0 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::invalid("n_list must contain positive sample sizes"));
        }
        if !(self.ci_gamma > 0.0 && self.ci_gamma <= 1.0) {
            return Err(Error::invalid("ci_gamma must lie in (0, 1]"));
        }
        let (truth_model, _) = self.truth.build()?;
        if self.x0.len() != truth_model.dim() {
            return Err(Error::invalid(format!(
                "x0 has dimension {}, truth model has {}",
                self.x0.len(),
                truth_model.dim()
            )));
        }
        if let Some(fit) = &self.fit {
            let (fit_model, _) = fit.build()?;
            if fit_model.dim() != truth_model.dim() {
                return Err(Error::invalid("fit model dimension differs from the truth"));
            }
        }
        if self.modes.is_empty() && self.selection.is_none() {
            return Err(Error::invalid("nothing to do: no modes and no selection"));
        }
        if let Some(sel) = &self.selection {
            sel.grid(&self.optimizer)?;
            sel.true_cell()?;
        }
        // Plan construction validates tau, step rule, and refine.
        let _ = self.plan_for(self.n_list[0])?;
        Ok(())
    }

    /// Simulation plan for one sample size.
    pub fn plan_for(&self, n: usize) -> Result<SimulationPlan> {
        SimulationPlan::new(n, self.step_rule, self.tau, self.x0.clone())?.with_refine(self.refine)
    }

    fn fit_spec(&self) -> &ModelSpec {
        self.fit.as_ref().unwrap_or(&self.truth)
    }
}

/// Everything recorded about one estimation replication; failures carry the
/// error text instead of estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub n: usize,
    pub mode: FitMode,
    pub path_seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Theta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

/// Fixed-range histogram with plot-ready bins.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// count / (total * bin width); total includes out-of-range values.
    pub density: Vec<f64>,
    pub below: u64,
    pub above: u64,
    pub total: u64,
}

impl Histogram {
    pub fn collect(
        label: impl Into<String>,
        lo: f64,
        hi: f64,
        bins: usize,
        values: impl IntoIterator<Item = f64>,
    ) -> Self {
        assert!(bins > 0 && hi > lo);
        let mut counts = vec![0u64; bins];
        let mut below = 0;
        let mut above = 0;
        let mut total = 0u64;
        let width = (hi - lo) / bins as f64;
        for v in values {
            total += 1;
            if v < lo {
                below += 1;
            } else if v >= hi {
                above += 1;
            } else {
                let idx = (((v - lo) / width) as usize).min(bins - 1);
                counts[idx] += 1;
            }
        }
        let denom = (total.max(1) as f64) * width;
        let density = counts.iter().map(|&c| c as f64 / denom).collect();
        Histogram {
            label: label.into(),
            lo,
            hi,
            counts,
            density,
            below,
            above,
            total,
        }
    }

    /// `bin_lo,bin_mid,bin_hi,count,density` rows.
    pub fn write_csv(&self, file: &Path) -> Result<()> {
        let mut text = String::from("bin_lo,bin_mid,bin_hi,count,density\n");
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        for (i, (&c, &d)) in self.counts.iter().zip(&self.density).enumerate() {
            let lo = self.lo + i as f64 * width;
            let mid = lo + 0.5 * width;
            let hi = lo + width;
            text.push_str(&format!("{lo},{mid},{hi},{c},{d}\n"));
        }
        std::fs::write(file, text)?;
        Ok(())
    }
}

/// Aggregates of one (n, mode) estimation cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimationSummary {
    pub n: usize,
    pub mode: FitMode,
    pub reps: usize,
    pub failures: usize,
    /// alpha names followed by beta names of the fitted model.
    pub param_names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Sample moments of h~ / h0.
    pub mean_h_ratio: f64,
    pub sd_h_ratio: f64,
    pub ci_gamma: f64,
    /// Percentage of successful replications whose h interval covers tau*h0.
    pub ci_coverage_percent: f64,
    pub u_alpha_mean: Vec<f64>,
    pub u_alpha_var: Vec<f64>,
    pub u_beta_mean: Vec<f64>,
    pub u_beta_var: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Aggregates of the selection study at one sample size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub row: ConsistencyRow,
}

/// The aggregate report: compact enough to serialize whole.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub estimation: Vec<EstimationSummary>,
    pub selection: Vec<SelectionSummary>,
}

/// Report plus everything needed to audit it.
#[derive(Clone, Debug)]
pub struct MonteCarloOutput {
    pub report: MonteCarloReport,
    /// Every estimation replication, in (n, mode, rep) order.
    pub records: Vec<RepRecord>,
    /// Histograms of the pooled studentized deviations and residuals,
    /// per (n, mode) cell.
    pub histograms: Vec<Histogram>,
}

/// Runs the configured studies. Deterministic given the config.
pub fn run_montecarlo(cfg: &ExperimentConfig) -> Result<MonteCarloOutput> {
    cfg.validate()?;
    match cfg.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| run_inner(cfg))
        }
        None => run_inner(cfg),
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<MonteCarloOutput> {
    let (truth_model, theta0_truth) = cfg.truth.build()?;
    let (fit_model, theta0_fit) = cfg.fit_spec().build()?;

    let mut records = Vec::new();
    let mut estimation = Vec::new();
    let mut histograms = Vec::new();

    for (i, &n) in cfg.n_list.iter().enumerate() {
        let plan = cfg.plan_for(n)?;
        let h0 = plan.h0();
        let target_h = cfg.tau * h0;
        for &mode in &cfg.modes {
            let cell: Vec<RepRecord> = (0..cfg.reps)
                .into_par_iter()
                .map(|r| {
                    let path_seed = cfg.seed.wrapping_add((i * cfg.reps + r) as u64);
                    run_one_rep(
                        cfg,
                        &truth_model,
                        &theta0_truth,
                        &fit_model,
                        &theta0_fit,
                        &plan,
                        n,
                        mode,
                        r,
                        path_seed,
                        h0,
                        target_h,
                    )
                })
                .collect();
            let (summary, hists) = summarize_cell(
                cfg,
                &fit_model,
                n,
                mode,
                &cell,
                &truth_model,
                &theta0_truth,
                &plan,
            )?;
            estimation.push(summary);
            histograms.extend(hists);
            records.extend(cell);
        }
    }

    let mut selection = Vec::new();
    if let Some(sel) = &cfg.selection {
        let grid = sel.grid(&cfg.optimizer)?;
        let rows = consistency_experiment(
            &truth_model,
            &theta0_truth,
            &cfg.plan_for(cfg.n_list[0])?,
            &grid,
            sel.strategy,
            sel.criterion,
            sel.true_cell()?,
            cfg.reps,
            &cfg.n_list,
            cfg.seed.wrapping_add((cfg.n_list.len() * cfg.reps) as u64),
        )?;
        selection.extend(rows.into_iter().map(|row| SelectionSummary {
            strategy: sel.strategy,
            criterion: sel.criterion,
            row,
        }));
    }

    Ok(MonteCarloOutput {
        report: MonteCarloReport {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            config: cfg.clone(),
            estimation,
            selection,
        },
        records,
        histograms,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one_rep(
    cfg: &ExperimentConfig,
    truth_model: &DiffusionModel,
    theta0_truth: &Theta,
    fit_model: &DiffusionModel,
    theta0_fit: &Theta,
    plan: &SimulationPlan,
    n: usize,
    mode: FitMode,
    rep: usize,
    path_seed: u64,
    h0: f64,
    target_h: f64,
) -> RepRecord {
    let mut record = RepRecord {
        rep,
        n,
        mode,
        path_seed,
        ok: false,
        error: None,
        theta: None,
        h_ratio: None,
        ci: None,
        covered: None,
        u_alpha: None,
        u_beta: None,
        converged: None,
    };
    let mut attempt = || -> Result<()> {
        let path = simulate_path(truth_model, theta0_truth, plan, path_seed)?;
        let mut opt = cfg.optimizer.clone();
        opt.seed = opt.seed.wrapping_add(path_seed);
        let fit = match mode {
            FitMode::Joint => fit_joint(&path, fit_model, &opt)?,
            FitMode::TwoStep => fit_two_step(&path, fit_model, &opt)?,
            FitMode::ThreeStep => fit_three_step(&path, fit_model, &opt)?,
        };
        record.theta = Some(fit.theta.clone());
        record.h_ratio = Some(fit.h_tilde / h0);
        record.converged = Some(fit.converged);
        if fit.cov.is_some() {
            let (lo, hi) = ci_for_h(&fit, cfg.ci_gamma)?;
            record.ci = Some((lo, hi));
            record.covered = Some(lo <= target_h && target_h <= hi);
        }
        let (ua, ub) = standardized_estimates(&path, fit_model, &fit, theta0_fit)?;
        record.u_alpha = Some(ua);
        record.u_beta = Some(ub);
        record.ok = true;
        Ok(())
    };
    if let Err(e) = attempt() {
        record.ok = false;
        record.error = Some(e.to_string());
    }
    record
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = csum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = csum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

#[allow(clippy::too_many_arguments)]
fn summarize_cell(
    cfg: &ExperimentConfig,
    fit_model: &DiffusionModel,
    n: usize,
    mode: FitMode,
    cell: &[RepRecord],
    truth_model: &DiffusionModel,
    theta0_truth: &Theta,
    plan: &SimulationPlan,
) -> Result<(EstimationSummary, Vec<Histogram>)> {
    let p = fit_model.dim_alpha();
    let q = fit_model.dim_beta();
    let mut param_names: Vec<String> = fit_model.alpha_names().to_vec();
    param_names.extend(fit_model.beta_names().iter().cloned());

    let ok: Vec<&RepRecord> = cell.iter().filter(|r| r.ok).collect();
    let failures = cell.len() - ok.len();
    let mut warnings: Vec<String> = cell
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("rep {}: {e}", r.rep)))
        .take(5)
        .collect();
    if failures > 5 {
        warnings.push(format!("... and {} more failures", failures - 5));
    }

    let mut mean = Vec::with_capacity(p + q);
    let mut sd = Vec::with_capacity(p + q);
    for k in 0..p + q {
        let vals: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.theta.as_ref())
            .map(|t| if k < p { t.alpha[k] } else { t.beta[k - p] })
            .collect();
        let (m, s) = mean_sd(&vals);
        mean.push(m);
        sd.push(s);
    }
    let ratios: Vec<f64> = ok.iter().filter_map(|r| r.h_ratio).collect();
    let (mean_h_ratio, sd_h_ratio) = mean_sd(&ratios);

    let covered: Vec<&RepRecord> = ok.iter().filter(|r| r.covered.is_some()).copied().collect();
    let ci_coverage_percent = if covered.is_empty() {
        f64::NAN
    } else {
        100.0 * covered.iter().filter(|r| r.covered == Some(true)).count() as f64
            / covered.len() as f64
    };

    let mut u_alpha_mean = Vec::with_capacity(p);
    let mut u_alpha_var = Vec::with_capacity(p);
    let mut u_beta_mean = Vec::with_capacity(q);
    let mut u_beta_var = Vec::with_capacity(q);
    let mut hists = Vec::new();
    let (lo, hi) = HISTOGRAM_RANGE;
    let mode_tag = match mode {
        FitMode::Joint => "joint",
        FitMode::TwoStep => "two_step",
        FitMode::ThreeStep => "three_step",
    };
    for k in 0..p {
        let vals: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.u_alpha.as_ref())
            .map(|u| u[k])
            .collect();
        let (m, s) = mean_sd(&vals);
        u_alpha_mean.push(m);
        u_alpha_var.push(s * s);
        hists.push(Histogram::collect(
            format!("u_{}_n{}_{}", fit_model.alpha_names()[k], n, mode_tag),
            lo,
            hi,
            HISTOGRAM_BINS,
            vals,
        ));
    }
    for k in 0..q {
        let vals: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.u_beta.as_ref())
            .map(|u| u[k])
            .collect();
        let (m, s) = mean_sd(&vals);
        u_beta_mean.push(m);
        u_beta_var.push(s * s);
        hists.push(Histogram::collect(
            format!("u_{}_n{}_{}", fit_model.beta_names()[k], n, mode_tag),
            lo,
            hi,
            HISTOGRAM_BINS,
            vals,
        ));
    }

    // Residual histogram: refit replications in seed order until the pool is
    // full. The residual pass is cheap next to the fit itself.
    let mut pool = Vec::new();
    for r in ok.iter().take(RESIDUAL_POOL_CAP.div_ceil(n.max(1))) {
        let path = simulate_path(truth_model, theta0_truth, plan, r.path_seed)?;
        let mut opt = cfg.optimizer.clone();
        opt.seed = opt.seed.wrapping_add(r.path_seed);
        let fit = match mode {
            FitMode::Joint => fit_joint(&path, fit_model, &opt)?,
            FitMode::TwoStep => fit_two_step(&path, fit_model, &opt)?,
            FitMode::ThreeStep => fit_three_step(&path, fit_model, &opt)?,
        };
        pool.extend(crate::estimate::residuals(&path, fit_model, &fit)?);
        if pool.len() >= RESIDUAL_POOL_CAP {
            break;
        }
    }
    hists.push(Histogram::collect(
        format!("residuals_n{}_{}", n, mode_tag),
        lo,
        hi,
        HISTOGRAM_BINS,
        pool,
    ));

    Ok((
        EstimationSummary {
            n,
            mode,
            reps: cell.len(),
            failures,
            param_names,
            mean,
            sd,
            mean_h_ratio,
            sd_h_ratio,
            ci_gamma: cfg.ci_gamma,
            ci_coverage_percent,
            u_alpha_mean,
            u_alpha_var,
            u_beta_mean,
            u_beta_var,
            warnings,
        },
        hists,
    ))
}

/// Writes report JSON, one JSONL line per replication, and histogram CSVs.
/// Returns the files written.
pub fn write_artifacts(out: &MonteCarloOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let report_file = dir.join("report.json");
    write_json(&out.report, &report_file)?;
    written.push(report_file);

    let records_file = dir.join("replications.jsonl");
    let mut text = String::new();
    for record in &out.records {
        let line = serde_json::to_string(record).map_err(|e| Error::Parse {
            path: records_file.display().to_string(),
            reason: e.to_string(),
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(&records_file, text)?;
    written.push(records_file);

    for hist in &out.histograms {
        let file = dir.join(format!("hist_{}.csv", hist.label));
        hist.write_csv(&file)?;
        written.push(file);
    }
    Ok(written)
}

/// Reads a `replications.jsonl` dump back.
pub fn read_records(file: &Path) -> Result<Vec<RepRecord>> {
    let text = std::fs::read_to_string(file)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|_| Error::BadRecord {
            row: i,
            reason: "invalid replication record".to_string(),
        })?);
    }
    Ok(out)
}

/// The estimator comparison the experiment is built around, as a convenience
/// for reporting: fits one path in a chosen mode.
pub fn fit_path(
    path: &crate::simulate::ObservationPath,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
    mode: FitMode,
) -> Result<FitResult> {
    match mode {
        FitMode::Joint => fit_joint(path, model, cfg),
        FitMode::TwoStep => fit_two_step(path, model, cfg),
        FitMode::ThreeStep => fit_three_step(path, model, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            seed: 11,
            reps: 3,
            n_list: vec![200],
            truth: ModelSpec {
                diffusion: "diff4".into(),
                drift: "drif2".into(),
                alpha: vec![2.0, -1.0],
                beta: vec![-1.0],
            },
            fit: None,
            modes: vec![FitMode::TwoStep],
            tau: 1.0,
            step_rule: StepRule::Power(2.0 / 3.0),
            x0: vec![1.0],
            refine: 5,
            optimizer: OptimizerConfig {
                multistart: 1,
                ..OptimizerConfig::default()
            },
            ci_gamma: 0.05,
            selection: None,
            threads: None,
            out_dir: None,
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let mut cfg = tiny_config();
        cfg.reps = 0;
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.ci_gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.x0 = vec![1.0, 2.0];
        assert!(cfg.validate().is_err());

        let json = serde_json::to_string(&tiny_config()).unwrap();
        let with_unknown = json.replacen('{', "{\"mystery\":1,", 1);
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(&with_unknown);
        assert!(parsed.is_err(), "unknown keys must be rejected");
    }

    #[test]
    fn montecarlo_is_deterministic_and_aggregates_match_records() {
        let cfg = tiny_config();
        let a = run_montecarlo(&cfg).unwrap();
        let b = run_montecarlo(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.theta, rb.theta);
            assert_eq!(ra.h_ratio.map(f64::to_bits), rb.h_ratio.map(f64::to_bits));
        }

        let summary = &a.report.estimation[0];
        assert_eq!(summary.reps, 3);
        assert_eq!(summary.failures, 0);
        // Recompute a mean from the records.
        let mut s = 0.0;
        for r in &a.records {
            s += r.theta.as_ref().unwrap().alpha[0];
        }
        let recomputed = s / a.records.len() as f64;
        assert!((summary.mean[0] - recomputed).abs() < 1e-12);
    }

    #[test]
    fn artifacts_round_trip_through_the_filesystem() {
        let cfg = tiny_config();
        let out = run_montecarlo(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_artifacts(&out, dir.path()).unwrap();
        assert!(files.iter().any(|f| f.ends_with("report.json")));
        let records = read_records(&dir.path().join("replications.jsonl")).unwrap();
        assert_eq!(records.len(), out.records.len());
        assert_eq!(records[0].theta, out.records[0].theta);
        // Histogram files exist and have the right shape.
        let hist_files: Vec<_> = files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "csv"))
            .collect();
        assert!(!hist_files.is_empty());
        let text = std::fs::read_to_string(hist_files[0]).unwrap();
        assert_eq!(text.lines().count(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn histogram_counts_every_value_once() {
        let values = [-10.0, -3.95, 0.0, 1.0, 3.999, 12.0];
        let h = Histogram::collect("t", -4.0, 4.0, 8, values.iter().copied());
        assert_eq!(h.total, 6);
        assert_eq!(h.below, 1);
        assert_eq!(h.above, 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        // Density integrates to the in-range fraction.
        let width = 1.0;
        let mass: f64 = h.density.iter().map(|d| d * width).sum();
        assert!((mass - 4.0 / 6.0).abs() < 1e-12);
    }
}
