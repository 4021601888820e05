//! Information criteria and model selection over candidate grids.
//!
//! Two Schwarz-type criteria are computed from a fitted model:
//!
//! ```text
//! mbic  = -2 m(theta~) + p_alpha log n + p_beta log(n h~),
//! mqbic = -2 m(theta~) + log|-d^2_alpha m(theta~)| + log|-d^2_beta m(theta~)|,
//! ```
//!
//! with the convention that an empty block contributes zero log-determinant.
//! Selection over a grid of M1 diffusion x M2 drift candidates runs either
//! jointly (M1 * M2 full fits) or in two stages (M1 diffusion fits, then M2
//! drift fits conditional on the stage-one winner). Model weights are the
//! softmin of criterion differences, normalized to sum to 100; for the
//! two-stage strategy the grid weight factorizes into the product of the two
//! stagewise softmins.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{
    finish_fit, fit_beta_given_alpha, fit_joint, FitMode, FitResult, OptimizerConfig, SearchSummary,
};
use crate::likelihood::Evaluator;
use crate::model::Theta;
use crate::model::{BuiltinCatalog, DiffusionModel};
use crate::numdiff;
use crate::optimize;
use crate::simulate::{simulate_path, ObservationPath, SimulationPlan};

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

/// Which criterion drives the selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MBic,
    MQBic,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::MBic => "mbic",
            Criterion::MQBic => "mqbic",
        }
    }
}

/// How candidate fits are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    TwoStep,
}

/// Pure criterion arithmetic: -2 loglik + p_alpha log n + p_beta log(n h).
/// The drift penalty needs n h > 0; it is simply absent when p_beta = 0.
pub fn mbic_value(loglik: f64, p_alpha: usize, p_beta: usize, n: usize, nh: f64) -> Result<f64> {
    let mut value = -2.0 * loglik + p_alpha as f64 * (n as f64).ln();
    if p_beta > 0 {
        if !nh.is_finite() || nh <= 0.0 {
            return Err(Error::NonPositiveNh { value: nh });
        }
        value += p_beta as f64 * nh.ln();
    }
    Ok(value)
}

/// mBIC of a fitted candidate.
pub fn mbic(_path: &ObservationPath, model: &DiffusionModel, fit: &FitResult) -> Result<f64> {
    mbic_value(
        fit.loglik,
        model.dim_alpha(),
        model.dim_beta(),
        fit.n,
        fit.n as f64 * fit.h_tilde,
    )
}

/// log|M| through the Cholesky factor; `name` enters the error on failure.
fn log_det_pd(m: &DMatrix<f64>, name: &'static str) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let ch = m.clone().cholesky().ok_or(Error::NonPDHessian { name })?;
    let l = ch.l_dirty();
    Ok(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// mQBIC of a fitted candidate, using the raw (unnormalized) observed
/// information blocks at theta~.
pub fn mqbic(path: &ObservationPath, model: &DiffusionModel, fit: &FitResult) -> Result<f64> {
    let mut ev = Evaluator::new(model, path)?;
    let p = model.dim_alpha();
    let q = model.dim_beta();
    let space = model.space();

    let alpha_term = if p == 0 {
        0.0
    } else {
        let beta = fit.theta.beta.clone();
        let hess = numdiff::hessian(
            |a| ev.mgqlf(a, &beta),
            &fit.theta.alpha,
            Some(space.alpha_bounds()),
        )?;
        log_det_pd(&hess.map(|v| -v), "alpha")?
    };

    let beta_term = if q == 0 {
        0.0
    } else {
        let hess = match ev.beta_hessian(&fit.theta.alpha)? {
            Some(hb) => hb,
            None => {
                let alpha = fit.theta.alpha.clone();
                numdiff::hessian(
                    |b| ev.mgqlf(&alpha, b),
                    &fit.theta.beta,
                    Some(space.beta_bounds()),
                )?
            }
        };
        log_det_pd(&hess.map(|v| -v), "beta")?
    };

    Ok(-2.0 * fit.loglik + alpha_term + beta_term)
}

/// Rectangular candidate family: M1 diffusion specifications crossed with M2
/// drift specifications, plus the optimizer settings every fit shares.
#[derive(Clone)]
pub struct CandidateGrid {
    /// Flattened m1-major: models[m1 * m2_count + m2].
    models: Vec<DiffusionModel>,
    m1_labels: Vec<String>,
    m2_labels: Vec<String>,
    optimizer: OptimizerConfig,
}

impl CandidateGrid {
    /// Grid over builtin coefficient keys (for example `["diff1", "diff4"]` x
    /// `["drif1", "drif2"]`). When the optimizer config carries start ranges
    /// they must be single intervals, broadcast to every coordinate of each
    /// candidate (the candidates have different parameter counts).
    pub fn builtin(
        diff_keys: &[&str],
        drift_keys: &[&str],
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        if diff_keys.is_empty() || drift_keys.is_empty() {
            return Err(Error::invalid(
                "candidate grid needs at least one key per axis",
            ));
        }
        Self::check_broadcast_ranges(&optimizer)?;
        let mut models = Vec::with_capacity(diff_keys.len() * drift_keys.len());
        for dk in diff_keys {
            for rk in drift_keys {
                models.push(BuiltinCatalog::model(dk, rk)?);
            }
        }
        Ok(CandidateGrid {
            models,
            m1_labels: diff_keys.iter().map(|s| s.to_string()).collect(),
            m2_labels: drift_keys.iter().map(|s| s.to_string()).collect(),
            optimizer,
        })
    }

    /// Grid from explicit models: `rows[m1][m2]` pairs diffusion candidate m1
    /// with drift candidate m2. All models must share the state dimension and
    /// all rows the same length; within a row the diffusion block must be the
    /// one of candidate m1, which the two-stage strategy relies on.
    pub fn from_models(
        rows: Vec<Vec<DiffusionModel>>,
        m1_labels: Vec<String>,
        m2_labels: Vec<String>,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid("candidate grid needs at least one model"));
        }
        let m2 = rows[0].len();
        if rows.iter().any(|r| r.len() != m2) {
            return Err(Error::invalid("candidate grid rows must have equal length"));
        }
        if m1_labels.len() != rows.len() || m2_labels.len() != m2 {
            return Err(Error::invalid(
                "grid label counts must match the grid shape",
            ));
        }
        let dim = rows[0][0].dim();
        if rows.iter().flatten().any(|m| m.dim() != dim) {
            return Err(Error::invalid(
                "all grid candidates must share the state dimension",
            ));
        }
        Self::check_broadcast_ranges(&optimizer)?;
        Ok(CandidateGrid {
            models: rows.into_iter().flatten().collect(),
            m1_labels,
            m2_labels,
            optimizer,
        })
    }

    fn check_broadcast_ranges(optimizer: &OptimizerConfig) -> Result<()> {
        for (name, ranges) in [
            ("alpha_init", &optimizer.alpha_init),
            ("beta_init", &optimizer.beta_init),
        ] {
            if let Some(r) = ranges {
                if r.len() != 1 {
                    return Err(Error::invalid(format!(
                        "grid optimizer {name} must be a single broadcast range, got {}",
                        r.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn m1_count(&self) -> usize {
        self.m1_labels.len()
    }

    pub fn m2_count(&self) -> usize {
        self.m2_labels.len()
    }

    pub fn m1_labels(&self) -> &[String] {
        &self.m1_labels
    }

    pub fn m2_labels(&self) -> &[String] {
        &self.m2_labels
    }

    pub fn model(&self, m1: usize, m2: usize) -> &DiffusionModel {
        &self.models[m1 * self.m2_count() + m2]
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.optimizer
    }

    /// Optimizer config for one candidate, with broadcast start ranges
    /// expanded to the candidate's parameter counts.
    pub fn candidate_config(&self, model: &DiffusionModel) -> OptimizerConfig {
        let mut cfg = self.optimizer.clone();
        cfg.alpha_init = cfg.alpha_init.map(|r| vec![r[0]; model.dim_alpha()]);
        cfg.beta_init = cfg.beta_init.map(|r| vec![r[0]; model.dim_beta()]);
        cfg
    }
}

/// Scores, weights, and the argmin for one criterion over the grid, flattened
/// m1-major; failed candidates carry `None` and are excluded from weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionTable {
    pub criterion: Criterion,
    pub scores: Vec<Option<f64>>,
    pub weights: Vec<Option<f64>>,
    pub selected: Option<(usize, usize)>,
}

impl CriterionTable {
    fn from_scores(criterion: Criterion, scores: Vec<Option<f64>>, m2_count: usize) -> Self {
        let weights = softmin_weights(&scores);
        let selected = argmin(&scores).map(|idx| (idx / m2_count, idx % m2_count));
        CriterionTable {
            criterion,
            scores,
            weights,
            selected,
        }
    }
}

/// Everything a selection run produced: both criterion tables, the fits that
/// were performed, and the winner under the primary criterion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    /// Criterion that drives `selected` and `best_fit`.
    pub criterion: Criterion,
    pub n: usize,
    pub m1_labels: Vec<String>,
    pub m2_labels: Vec<String>,
    pub mbic: CriterionTable,
    pub mqbic: CriterionTable,
    /// Winner (m1, m2) under the primary criterion.
    pub selected: (usize, usize),
    pub best_fit: FitResult,
    /// Fit per grid cell where one was performed, flattened m1-major. Joint
    /// selection fills every non-failed cell; two-stage selection fills the
    /// stage-one winner's row.
    pub fits: Vec<Option<FitResult>>,
    /// Number of candidate fits attempted: M1 * M2 jointly, M1 + M2 two-stage.
    pub fits_performed: usize,
    pub warnings: Vec<String>,
}

impl SelectionReport {
    fn table(&self, criterion: Criterion) -> &CriterionTable {
        match criterion {
            Criterion::MBic => &self.mbic,
            Criterion::MQBic => &self.mqbic,
        }
    }

    /// Weight of cell (m1, m2) under the primary criterion, if defined.
    pub fn weight(&self, m1: usize, m2: usize) -> Option<f64> {
        self.table(self.criterion).weights[m1 * self.m2_labels.len() + m2]
    }
}

/// Softmin weights 100 * exp(-(C - C_min)/2) / sum(...) over defined scores.
/// Differences are taken before exponentiation so large criteria cannot
/// overflow.
fn softmin_weights(scores: &[Option<f64>]) -> Vec<Option<f64>> {
    let min = scores
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    if !min.is_finite() {
        return vec![None; scores.len()];
    }
    let exps: Vec<Option<f64>> = scores
        .iter()
        .map(|s| s.map(|v| (-0.5 * (v - min)).exp()))
        .collect();
    let total: f64 = exps.iter().flatten().sum();
    exps.iter().map(|e| e.map(|e| 100.0 * e / total)).collect()
}

/// Index of the smallest defined score; ties resolve to the lowest index.
fn argmin(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s {
            if best.map_or(true, |(_, bv)| *v < bv) {
                best = Some((i, *v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Fits every candidate jointly and selects the criterion argmin.
pub fn select_joint(
    path: &ObservationPath,
    grid: &CandidateGrid,
    criterion: Criterion,
) -> Result<SelectionReport> {
    let m1c = grid.m1_count();
    let m2c = grid.m2_count();
    let cells: Vec<usize> = (0..m1c * m2c).collect();
    let results: Vec<Result<FitResult>> = cells
        .par_iter()
        .map(|&idx| {
            let model = &grid.models[idx];
            fit_joint(path, model, &grid.candidate_config(model))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut fits: Vec<Option<FitResult>> = Vec::with_capacity(results.len());
    let mut first_error: Option<String> = None;
    for (idx, res) in results.into_iter().enumerate() {
        match res {
            Ok(fit) => fits.push(Some(fit)),
            Err(e) => {
                let label = grid.models[idx].label().to_string();
                if first_error.is_none() {
                    first_error = Some(e.to_string());
                }
                warnings.push(format!("candidate {label} failed: {e}"));
                fits.push(None);
            }
        }
    }
    if fits.iter().all(|f| f.is_none()) {
        return Err(Error::AllCandidatesFailed {
            total: fits.len(),
            first: first_error.unwrap_or_default(),
        });
    }

    let mut score = |crit: Criterion| -> Vec<Option<f64>> {
        fits.iter()
            .enumerate()
            .map(|(idx, fit)| {
                let model = &grid.models[idx];
                fit.as_ref().and_then(|f| {
                    let r = match crit {
                        Criterion::MBic => mbic(path, model, f),
                        Criterion::MQBic => mqbic(path, model, f),
                    };
                    match r {
                        Ok(v) => Some(v),
                        Err(e) => {
                            warnings.push(format!(
                                "{} of candidate {} failed: {e}",
                                crit.label(),
                                model.label()
                            ));
                            None
                        }
                    }
                })
            })
            .collect()
    };
    let mbic_scores = score(Criterion::MBic);
    let mqbic_scores = score(Criterion::MQBic);

    let mbic_table = CriterionTable::from_scores(Criterion::MBic, mbic_scores, m2c);
    let mqbic_table = CriterionTable::from_scores(Criterion::MQBic, mqbic_scores, m2c);
    let primary = match criterion {
        Criterion::MBic => &mbic_table,
        Criterion::MQBic => &mqbic_table,
    };
    let selected = primary.selected.ok_or_else(|| Error::AllCandidatesFailed {
        total: fits.len(),
        first: format!("no candidate produced a finite {}", criterion.label()),
    })?;
    let best_fit = fits[selected.0 * m2c + selected.1]
        .clone()
        .expect("selected cell has a fit");

    let n = best_fit.n;
    Ok(SelectionReport {
        schema_version: SELECTION_SCHEMA_VERSION,
        strategy: Strategy::Joint,
        criterion,
        n,
        m1_labels: grid.m1_labels.clone(),
        m2_labels: grid.m2_labels.clone(),
        mbic: mbic_table,
        mqbic: mqbic_table,
        selected,
        best_fit,
        fits,
        fits_performed: m1c * m2c,
        warnings,
    })
}

struct StageOne {
    alpha: Vec<f64>,
    h1: f64,
    h_alpha: f64,
    converged: bool,
    at_boundary: bool,
    fn_evals: usize,
    trace: Vec<f64>,
}

/// Stagewise selection: diffusion candidates scored by
/// -2 h1(alpha') + penalty, then drift candidates conditional on the winner by
/// -2 h2(alpha', beta') + penalty. The reported grid table is the sum of the
/// two stage criteria, whose softmin factorizes into the product of the
/// stagewise softmins.
pub fn select_two_step(
    path: &ObservationPath,
    grid: &CandidateGrid,
    criterion: Criterion,
) -> Result<SelectionReport> {
    let m1c = grid.m1_count();
    let m2c = grid.m2_count();
    let n = path.n_increments();

    // Stage one: alpha fits per diffusion candidate (the drift block of the
    // paired model is irrelevant to h1).
    let stage1: Vec<Result<StageOne>> = (0..m1c)
        .into_par_iter()
        .map(|m1| stage_one_fit(path, grid, m1))
        .collect();

    let mut warnings = Vec::new();
    let mut first_error: Option<String> = None;
    let mut s1: Vec<Option<StageOne>> = Vec::with_capacity(m1c);
    for (m1, res) in stage1.into_iter().enumerate() {
        match res {
            Ok(s) => s1.push(Some(s)),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e.to_string());
                }
                warnings.push(format!(
                    "diffusion candidate {} failed: {e}",
                    grid.m1_labels[m1]
                ));
                s1.push(None);
            }
        }
    }

    // Stage-one criterion columns.
    let logn = (n as f64).ln();
    let c1_mbic: Vec<Option<f64>> = s1
        .iter()
        .enumerate()
        .map(|(m1, s)| {
            s.as_ref()
                .map(|s| -2.0 * s.h1 + grid.model(m1, 0).dim_alpha() as f64 * logn)
        })
        .collect();
    let c1_mqbic: Vec<Option<f64>> = s1
        .iter()
        .enumerate()
        .map(|(m1, s)| {
            s.as_ref().and_then(
                |s| match stage_one_logdet(path, grid.model(m1, 0), &s.alpha) {
                    Ok(ld) => Some(-2.0 * s.h1 + ld),
                    Err(e) => {
                        warnings.push(format!(
                            "mqbic stage-one term of {} failed: {e}",
                            grid.m1_labels[m1]
                        ));
                        None
                    }
                },
            )
        })
        .collect();

    let primary_c1 = match criterion {
        Criterion::MBic => &c1_mbic,
        Criterion::MQBic => &c1_mqbic,
    };
    let m1_star = argmin(primary_c1).ok_or_else(|| Error::AllCandidatesFailed {
        total: m1c,
        first: first_error
            .clone()
            .unwrap_or_else(|| format!("no candidate produced a finite {}", criterion.label())),
    })?;
    if let Some(other) = argmin(match criterion {
        Criterion::MBic => &c1_mqbic,
        Criterion::MQBic => &c1_mbic,
    }) {
        if other != m1_star {
            warnings.push(format!(
                "secondary criterion prefers diffusion candidate {}; its table is conditional on {}",
                grid.m1_labels[other], grid.m1_labels[m1_star]
            ));
        }
    }
    let s1_star = s1[m1_star].as_ref().expect("argmin points at a fit");
    let nh = n as f64 * s1_star.h_alpha;

    // Stage two: drift candidates conditional on the stage-one winner.
    let stage2: Vec<Result<(FitResult, f64)>> = (0..m2c)
        .into_par_iter()
        .map(|m2| stage_two_fit(path, grid, m1_star, m2, s1_star))
        .collect();

    let mut s2: Vec<Option<(FitResult, f64)>> = Vec::with_capacity(m2c);
    for (m2, res) in stage2.into_iter().enumerate() {
        match res {
            Ok(v) => s2.push(Some(v)),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e.to_string());
                }
                warnings.push(format!(
                    "drift candidate {} failed: {e}",
                    grid.m2_labels[m2]
                ));
                s2.push(None);
            }
        }
    }

    let c2_mbic: Vec<Option<f64>> = s2
        .iter()
        .enumerate()
        .map(|(m2, s)| {
            s.as_ref().and_then(|(_, h2)| {
                let p_beta = grid.model(m1_star, m2).dim_beta();
                match mbic_value(0.0, 0, p_beta, n, nh) {
                    Ok(pen) => Some(-2.0 * h2 + pen),
                    Err(e) => {
                        warnings.push(format!(
                            "mbic stage-two term of {} failed: {e}",
                            grid.m2_labels[m2]
                        ));
                        None
                    }
                }
            })
        })
        .collect();
    let c2_mqbic: Vec<Option<f64>> = s2
        .iter()
        .enumerate()
        .map(|(m2, s)| {
            s.as_ref().and_then(|(fit, h2)| {
                match stage_two_logdet(path, grid.model(m1_star, m2), fit) {
                    Ok(ld) => Some(-2.0 * h2 + ld),
                    Err(e) => {
                        warnings.push(format!(
                            "mqbic stage-two term of {} failed: {e}",
                            grid.m2_labels[m2]
                        ));
                        None
                    }
                }
            })
        })
        .collect();

    // Grid tables: score(m1, m2) = c1(m1) + c2(m2 | winner).
    let combine = |c1: &[Option<f64>], c2: &[Option<f64>]| -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(m1c * m2c);
        for a in c1 {
            for b in c2 {
                out.push(match (a, b) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                });
            }
        }
        out
    };
    let mbic_table = CriterionTable::from_scores(Criterion::MBic, combine(&c1_mbic, &c2_mbic), m2c);
    let mqbic_table =
        CriterionTable::from_scores(Criterion::MQBic, combine(&c1_mqbic, &c2_mqbic), m2c);

    let primary_c2 = match criterion {
        Criterion::MBic => &c2_mbic,
        Criterion::MQBic => &c2_mqbic,
    };
    let m2_star = argmin(primary_c2).ok_or_else(|| Error::AllCandidatesFailed {
        total: m2c,
        first: first_error.unwrap_or_else(|| {
            format!("no drift candidate produced a finite {}", criterion.label())
        }),
    })?;

    let mut fits: Vec<Option<FitResult>> = vec![None; m1c * m2c];
    for (m2, s) in s2.into_iter().enumerate() {
        if let Some((fit, _)) = s {
            fits[m1_star * m2c + m2] = Some(fit);
        }
    }
    let best_fit = fits[m1_star * m2c + m2_star]
        .clone()
        .expect("selected cell has a fit");

    Ok(SelectionReport {
        schema_version: SELECTION_SCHEMA_VERSION,
        strategy: Strategy::TwoStep,
        criterion,
        n,
        m1_labels: grid.m1_labels.clone(),
        m2_labels: grid.m2_labels.clone(),
        mbic: mbic_table,
        mqbic: mqbic_table,
        selected: (m1_star, m2_star),
        best_fit,
        fits,
        fits_performed: m1c + m2c,
        warnings,
    })
}

fn stage_one_fit(path: &ObservationPath, grid: &CandidateGrid, m1: usize) -> Result<StageOne> {
    let model = grid.model(m1, 0);
    let cfg = grid.candidate_config(model);
    cfg.validate(model)?;
    let mut ev = Evaluator::new(model, path)?;
    let p = model.dim_alpha();
    if p == 0 {
        let h1 = ev.h1(&[])?;
        return Ok(StageOne {
            alpha: Vec::new(),
            h1,
            h_alpha: ev.h_of_alpha(&[])?,
            converged: true,
            at_boundary: false,
            fn_evals: 1,
            trace: vec![h1],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = optimize::sample_starts(&cfg.alpha_ranges(model), cfg.multistart, &mut rng);
    let (out, trace) = optimize::multistart(
        |a| match ev.h1(a) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        },
        model.space().alpha_bounds(),
        &starts,
        cfg.method,
        &cfg.search_options(),
    );
    if !out.f.is_finite() {
        return Err(Error::NoConvergence {
            starts: cfg.multistart,
        });
    }
    let h1 = -out.f;
    let h_alpha = ev.h_of_alpha(&out.x)?;
    Ok(StageOne {
        alpha: out.x,
        h1,
        h_alpha,
        converged: out.converged,
        at_boundary: out.at_boundary,
        fn_evals: out.fn_evals,
        trace: trace.iter().map(|f| -f).collect(),
    })
}

fn stage_two_fit(
    path: &ObservationPath,
    grid: &CandidateGrid,
    m1_star: usize,
    m2: usize,
    s1: &StageOne,
) -> Result<(FitResult, f64)> {
    let model = grid.model(m1_star, m2);
    let cfg = grid.candidate_config(model);
    let mut ev = Evaluator::new(model, path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stage = fit_beta_given_alpha(
        &mut ev,
        model,
        &cfg,
        &cfg.search_options(),
        &mut rng,
        &s1.alpha,
    )?;
    let h2 = ev.h2(&s1.alpha, &stage.beta)?;
    let summary = SearchSummary {
        converged: s1.converged && stage.converged,
        at_boundary: s1.at_boundary || stage.at_boundary,
        fn_evals: s1.fn_evals + stage.fn_evals,
        trace: s1.trace.clone(),
        warnings: stage.warnings,
    };
    let fit = finish_fit(
        &mut ev,
        FitMode::TwoStep,
        s1.alpha.clone(),
        stage.beta,
        summary,
    )?;
    Ok((fit, h2))
}

/// log|-d^2_alpha h1(alpha')| for the stagewise mQBIC.
fn stage_one_logdet(path: &ObservationPath, model: &DiffusionModel, alpha: &[f64]) -> Result<f64> {
    if model.dim_alpha() == 0 {
        return Ok(0.0);
    }
    let mut ev = Evaluator::new(model, path)?;
    let hess = numdiff::hessian(|a| ev.h1(a), alpha, Some(model.space().alpha_bounds()))?;
    log_det_pd(&hess.map(|v| -v), "alpha")
}

/// log|-d^2_beta h2(alpha', beta')| for the stagewise mQBIC; identical to the
/// beta block of the full criterion since h1 is beta-free.
fn stage_two_logdet(
    path: &ObservationPath,
    model: &DiffusionModel,
    fit: &FitResult,
) -> Result<f64> {
    if model.dim_beta() == 0 {
        return Ok(0.0);
    }
    let mut ev = Evaluator::new(model, path)?;
    let hess = match ev.beta_hessian(&fit.theta.alpha)? {
        Some(hb) => hb,
        None => {
            let alpha = fit.theta.alpha.clone();
            numdiff::hessian(
                |b| ev.mgqlf(&alpha, b),
                &fit.theta.beta,
                Some(model.space().beta_bounds()),
            )?
        }
    };
    log_det_pd(&hess.map(|v| -v), "beta")
}

/// One row of a selection-consistency experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    /// Percentage of successful replications selecting the true cell.
    pub true_frequency: f64,
    /// Mean weight (percent) of the true cell under the primary criterion,
    /// averaged over successful replications.
    pub mean_true_weight: f64,
}

/// Repeated selection on fresh synthetic paths across sample sizes: the
/// empirical check of selection consistency. `plan` provides tau, x0, the
/// stepsize rule, and the refinement; its n is overridden by `n_list`.
/// Replication r at sample size index i uses path seed `seed + i * reps + r`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_experiment(
    truth_model: &DiffusionModel,
    theta0: &Theta,
    plan: &SimulationPlan,
    grid: &CandidateGrid,
    strategy: Strategy,
    criterion: Criterion,
    true_cell: (usize, usize),
    reps: usize,
    n_list: &[usize],
    seed: u64,
) -> Result<Vec<ConsistencyRow>> {
    if reps == 0 || n_list.is_empty() {
        return Err(Error::invalid(
            "consistency experiment needs reps >= 1 and sample sizes",
        ));
    }
    if true_cell.0 >= grid.m1_count() || true_cell.1 >= grid.m2_count() {
        return Err(Error::invalid("true cell lies outside the candidate grid"));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let mut rep_plan = plan.clone();
        rep_plan.n = n;
        let outcomes: Vec<Result<(bool, Option<f64>)>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let path_seed = seed.wrapping_add((i * reps + r) as u64);
                let path = simulate_path(truth_model, theta0, &rep_plan, path_seed)?;
                let report = match strategy {
                    Strategy::Joint => select_joint(&path, grid, criterion)?,
                    Strategy::TwoStep => select_two_step(&path, grid, criterion)?,
                };
                let hit = report.selected == true_cell;
                let weight = report.weight(true_cell.0, true_cell.1);
                Ok((hit, weight))
            })
            .collect();
        let mut hits = 0usize;
        let mut weight_sum = 0.0;
        let mut failures = 0usize;
        let mut successes = 0usize;
        for out in outcomes {
            match out {
                Ok((hit, weight)) => {
                    successes += 1;
                    if hit {
                        hits += 1;
                    }
                    weight_sum += weight.unwrap_or(0.0);
                }
                Err(_) => failures += 1,
            }
        }
        let denom = successes.max(1) as f64;
        rows.push(ConsistencyRow {
            n,
            reps,
            failures,
            true_frequency: 100.0 * hits as f64 / denom,
            mean_true_weight: weight_sum / denom,
        });
    }
    Ok(rows)
}
