//! Maximizers of the modified quasi-likelihood and the asymptotic-variance
//! plug-ins for (h, alpha, beta).
//!
//! Three fitting modes share one objective:
//!
//! ```text
//! joint      — maximize m(alpha, beta) over the box;
//! two-step   — alpha' maximizes h1, then beta' maximizes h2(alpha', .)
//!              (closed form when the drift is linear in beta);
//! three-step — re-maximize m(., beta') over alpha after the two-step pass.
//! ```
//!
//! For drift linear in beta the joint fit profiles beta out in closed form
//! and searches over alpha only; the profiled criterion has the same maximum
//! and any maximizer is acceptable. If the profiled drift maximizer falls
//! outside the box the fit transparently reruns over the full parameter.
//!
//! The covariance plug-ins implement the limit
//!
//! ```text
//! (sqrt(n)(h~/(tau h0) - 1), sqrt(n)(alpha~ - alpha0),
//!  sqrt(n h~)(beta~ - beta0)) -> N(0, Sigma),
//! ```
//!
//! with Sigma assembled from K, Gamma_1, Gamma_2 and exact zero blocks in the
//! (h, beta) and (alpha, beta) positions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Evaluator;
use crate::model::{DiffusionModel, DriftCoeff, Theta};
use crate::numdiff;
use crate::optimize::{self, Method, SearchOptions};
use crate::simulate::ObservationPath;
use crate::util::{normal_quantile, serde_mat, sym_sqrt};

pub const FIT_SCHEMA_VERSION: u32 = 1;

/// How the estimate was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Joint,
    TwoStep,
    ThreeStep,
}

/// User-facing optimizer settings for the fitting layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Number of random starts (>= 1); ties resolve to the earliest start.
    pub multistart: usize,
    pub max_iters: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Seed of the start sampler.
    pub seed: u64,
    /// Start-sampling ranges; the full box when absent. A single range
    /// broadcasts to every coordinate.
    pub alpha_init: Option<Vec<(f64, f64)>>,
    pub beta_init: Option<Vec<(f64, f64)>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::NelderMead,
            multistart: 8,
            max_iters: 2000,
            f_tol: 1e-10,
            x_tol: 1e-8,
            seed: 0,
            alpha_init: None,
            beta_init: None,
        }
    }
}

impl OptimizerConfig {
    pub(crate) fn validate(&self, model: &DiffusionModel) -> Result<()> {
        if self.multistart == 0 {
            return Err(Error::invalid("multistart must be at least 1"));
        }
        if !(self.f_tol > 0.0 && self.x_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        for (name, ranges, dim) in [
            ("alpha_init", &self.alpha_init, model.dim_alpha()),
            ("beta_init", &self.beta_init, model.dim_beta()),
        ] {
            if let Some(rs) = ranges {
                if rs.len() != dim && rs.len() != 1 {
                    return Err(Error::invalid(format!(
                        "{name} must have {dim} ranges (or a single broadcast range), got {}",
                        rs.len()
                    )));
                }
                if rs
                    .iter()
                    .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
                {
                    return Err(Error::invalid(format!(
                        "{name} ranges must be finite with lo <= hi"
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn search_options(&self) -> SearchOptions {
        SearchOptions {
            max_iters: self.max_iters,
            f_tol: self.f_tol,
            x_tol: self.x_tol,
        }
    }

    /// Start ranges for one parameter block: explicit per coordinate, a
    /// single range repeated across coordinates, or the box when absent.
    fn expand(
        init: &Option<Vec<(f64, f64)>>,
        dim: usize,
        bounds: &[(f64, f64)],
    ) -> Vec<(f64, f64)> {
        match init {
            Some(rs) if rs.len() == 1 => vec![rs[0]; dim],
            Some(rs) => rs.clone(),
            None => bounds.to_vec(),
        }
    }

    pub(crate) fn alpha_ranges(&self, model: &DiffusionModel) -> Vec<(f64, f64)> {
        Self::expand(
            &self.alpha_init,
            model.dim_alpha(),
            model.space().alpha_bounds(),
        )
    }

    pub(crate) fn beta_ranges(&self, model: &DiffusionModel) -> Vec<(f64, f64)> {
        Self::expand(
            &self.beta_init,
            model.dim_beta(),
            model.space().beta_bounds(),
        )
    }
}

/// Plug-in covariance blocks and the assembled Sigma for (h, alpha, beta).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceEstimates {
    /// K (length p_alpha).
    pub k: Vec<f64>,
    #[serde(with = "serde_mat")]
    pub gamma1: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub gamma2: DMatrix<f64>,
    /// (1 + p_alpha + p_beta)^2, coordinate order (h-ratio, alpha, beta).
    #[serde(with = "serde_mat")]
    pub sigma: DMatrix<f64>,
    /// h~ * sqrt(Sigma_hh) / sqrt(n): the absolute-scale stderr of h~.
    pub stderr_h: f64,
    /// sqrt(Sigma_alpha,kk / n).
    pub stderr_alpha: Vec<f64>,
    /// sqrt(Sigma_beta,kk / (n h~)).
    pub stderr_beta: Vec<f64>,
}

/// A fitted model with its criterion values and convergence metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub model_label: String,
    pub mode: FitMode,
    pub n: usize,
    pub dim: usize,
    pub alpha_names: Vec<String>,
    pub beta_names: Vec<String>,
    pub theta: Theta,
    /// h~ = h(alpha~), always positive.
    pub h_tilde: f64,
    /// Modified quasi-likelihood at theta~.
    pub loglik: f64,
    /// Criterion components: loglik = -(n d / 2)(1 + log 2 pi) + h1 + h2.
    pub h1: f64,
    pub h2: f64,
    pub converged: bool,
    pub at_boundary: bool,
    pub fn_evals: usize,
    /// Best criterion value per start of the final alpha search, in the
    /// maximization scale of that mode's objective.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
    pub cov: Option<CovarianceEstimates>,
}

pub(crate) struct SearchSummary {
    pub(crate) converged: bool,
    pub(crate) at_boundary: bool,
    pub(crate) fn_evals: usize,
    pub(crate) trace: Vec<f64>,
    pub(crate) warnings: Vec<String>,
}

fn check_sample_size(path: &ObservationPath, model: &DiffusionModel) -> Result<()> {
    let need = model.dim_alpha() + model.dim_beta() + 2;
    if path.n_increments() < need {
        return Err(Error::degenerate(format!(
            "need at least {need} increments to fit {}, got {}",
            model.label(),
            path.n_increments()
        )));
    }
    Ok(())
}

/// Wraps a criterion evaluation for the minimizing engines: failures and
/// non-finite values become +infinity.
fn neg_or_inf(v: Result<f64>) -> f64 {
    match v {
        Ok(x) if x.is_finite() => -x,
        _ => f64::INFINITY,
    }
}

pub(crate) fn finish_fit(
    ev: &mut Evaluator,
    mode: FitMode,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    summary: SearchSummary,
) -> Result<FitResult> {
    let model = ev.model();
    let label = model.label().to_string();
    let alpha_names = model.alpha_names().to_vec();
    let beta_names = model.beta_names().to_vec();
    let n = ev.n();
    let dim = ev.d();
    let h_tilde = ev.h_of_alpha(&alpha)?;
    let h1 = ev.h1(&alpha)?;
    let h2 = ev.h2(&alpha, &beta)?;
    let loglik = ev.mgqlf(&alpha, &beta)?;
    let theta = Theta::new(alpha, beta);
    let mut warnings = summary.warnings;
    let cov = match cov_from_eval(ev, &theta, h_tilde) {
        Ok(c) => Some(c),
        Err(e) => {
            warnings.push(format!("covariance estimates unavailable: {e}"));
            None
        }
    };
    Ok(FitResult {
        schema_version: FIT_SCHEMA_VERSION,
        model_label: label,
        mode,
        n,
        dim,
        alpha_names,
        beta_names,
        theta,
        h_tilde,
        loglik,
        h1,
        h2,
        converged: summary.converged && !summary.at_boundary,
        at_boundary: summary.at_boundary,
        fn_evals: summary.fn_evals,
        trace: summary.trace,
        warnings,
        cov,
    })
}

/// Joint maximization of the modified quasi-likelihood over the box.
pub fn fit_joint(
    path: &ObservationPath,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    cfg.validate(model)?;
    check_sample_size(path, model)?;
    let mut ev = Evaluator::new(model, path)?;
    let opts = cfg.search_options();
    let linear = matches!(model.drift(), DriftCoeff::LinearInBeta { .. });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if linear {
        // Profile beta out: for each alpha the inner maximum over beta is the
        // closed-form normal-equation solution, so the search runs over alpha
        // only. Unconstrained in beta; checked against the box afterwards.
        let starts = optimize::sample_starts(&cfg.alpha_ranges(model), cfg.multistart, &mut rng);
        let profiled = |ev: &mut Evaluator, a: &[f64]| -> Result<f64> {
            let h1 = ev.h1(a)?;
            let (_, h2) = ev
                .profile_beta(a)?
                .expect("linear drift has a profiled solution");
            Ok(mgqlf_const(ev.n(), ev.d()) + h1 + h2)
        };
        let (out, trace) = optimize::multistart(
            |a| neg_or_inf(profiled(&mut ev, a)),
            model.space().alpha_bounds(),
            &starts,
            cfg.method,
            &opts,
        );
        if !out.f.is_finite() {
            return Err(Error::NoConvergence {
                starts: cfg.multistart,
            });
        }
        let alpha = out.x;
        let (beta, _) = ev.profile_beta(&alpha)?.expect("linear drift");
        let beta_theta = Theta::new(alpha.clone(), beta.clone());
        if model.space().contains(&beta_theta) {
            let summary = SearchSummary {
                converged: out.converged,
                at_boundary: out.at_boundary,
                fn_evals: out.fn_evals,
                trace: trace.iter().map(|f| -f).collect(),
                warnings: Vec::new(),
            };
            return finish_fit(&mut ev, FitMode::Joint, alpha, beta, summary);
        }
        // The unconstrained drift maximizer left the box: fall back to the
        // constrained full-parameter search.
        let mut warnings = vec![
            "profiled drift maximizer left the box; rerunning over the full parameter".to_string(),
        ];
        let (alpha, beta, summary) = full_joint_search(&mut ev, model, cfg, &opts, &mut rng)?;
        let mut summary = summary;
        warnings.append(&mut summary.warnings);
        summary.warnings = warnings;
        return finish_fit(&mut ev, FitMode::Joint, alpha, beta, summary);
    }

    let (alpha, beta, summary) = full_joint_search(&mut ev, model, cfg, &opts, &mut rng)?;
    finish_fit(&mut ev, FitMode::Joint, alpha, beta, summary)
}

fn full_joint_search(
    ev: &mut Evaluator,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
    opts: &SearchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>, SearchSummary)> {
    let p = model.dim_alpha();
    let mut ranges = cfg.alpha_ranges(model);
    ranges.extend(cfg.beta_ranges(model));
    let mut bounds = model.space().alpha_bounds().to_vec();
    bounds.extend_from_slice(model.space().beta_bounds());
    let starts = optimize::sample_starts(&ranges, cfg.multistart, rng);
    let (out, trace) = optimize::multistart(
        |x| neg_or_inf(ev.mgqlf(&x[..p], &x[p..])),
        &bounds,
        &starts,
        cfg.method,
        opts,
    );
    if !out.f.is_finite() {
        return Err(Error::NoConvergence {
            starts: cfg.multistart,
        });
    }
    let alpha = out.x[..p].to_vec();
    let beta = out.x[p..].to_vec();
    Ok((
        alpha,
        beta,
        SearchSummary {
            converged: out.converged,
            at_boundary: out.at_boundary,
            fn_evals: out.fn_evals,
            trace: trace.iter().map(|f| -f).collect(),
            warnings: Vec::new(),
        },
    ))
}

/// Two-step estimation: alpha' from h1 alone, then beta' from h2(alpha', .),
/// in closed form whenever the drift is linear in beta.
pub fn fit_two_step(
    path: &ObservationPath,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    cfg.validate(model)?;
    check_sample_size(path, model)?;
    let mut ev = Evaluator::new(model, path)?;
    let opts = cfg.search_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = model.dim_alpha();

    // Stage one: diffusion parameters.
    let (alpha, mut summary) = if p == 0 {
        let v = ev.h1(&[])?;
        (
            Vec::new(),
            SearchSummary {
                converged: true,
                at_boundary: false,
                fn_evals: 1,
                trace: vec![v],
                warnings: Vec::new(),
            },
        )
    } else {
        let starts = optimize::sample_starts(&cfg.alpha_ranges(model), cfg.multistart, &mut rng);
        let (out, trace) = optimize::multistart(
            |a| neg_or_inf(ev.h1(a)),
            model.space().alpha_bounds(),
            &starts,
            cfg.method,
            &opts,
        );
        if !out.f.is_finite() {
            return Err(Error::NoConvergence {
                starts: cfg.multistart,
            });
        }
        (
            out.x,
            SearchSummary {
                converged: out.converged,
                at_boundary: out.at_boundary,
                fn_evals: out.fn_evals,
                trace: trace.iter().map(|f| -f).collect(),
                warnings: Vec::new(),
            },
        )
    };

    // Stage two: drift parameters given alpha'.
    let stage = fit_beta_given_alpha(&mut ev, model, cfg, &opts, &mut rng, &alpha)?;
    summary.fn_evals += stage.fn_evals;
    summary.converged &= stage.converged;
    summary.at_boundary |= stage.at_boundary;
    summary.warnings.extend(stage.warnings);

    finish_fit(&mut ev, FitMode::TwoStep, alpha, stage.beta, summary)
}

/// Outcome of the conditional drift stage beta -> argmax h2(alpha, .).
pub(crate) struct BetaStage {
    pub(crate) beta: Vec<f64>,
    pub(crate) fn_evals: usize,
    pub(crate) converged: bool,
    pub(crate) at_boundary: bool,
    pub(crate) warnings: Vec<String>,
}

/// Maximizes h2(alpha, .) over beta: closed form for drift linear in beta
/// (falling back to the box-constrained search when the solution leaves the
/// box), the optimizer otherwise.
pub(crate) fn fit_beta_given_alpha(
    ev: &mut Evaluator,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
    opts: &SearchOptions,
    rng: &mut ChaCha8Rng,
    alpha: &[f64],
) -> Result<BetaStage> {
    if model.dim_beta() == 0 {
        return Ok(BetaStage {
            beta: Vec::new(),
            fn_evals: 0,
            converged: true,
            at_boundary: false,
            warnings: Vec::new(),
        });
    }
    if let Some((beta, _)) = ev.profile_beta(alpha)? {
        let cand = Theta::new(alpha.to_vec(), beta.clone());
        if model.space().contains(&cand) {
            return Ok(BetaStage {
                beta,
                fn_evals: 1,
                converged: true,
                at_boundary: false,
                warnings: Vec::new(),
            });
        }
        let (b, evals, conv, bound) = beta_box_search(ev, model, cfg, opts, rng, alpha)?;
        return Ok(BetaStage {
            beta: b,
            fn_evals: evals,
            converged: conv,
            at_boundary: bound,
            warnings: vec![
                "closed-form drift estimate left the box; using the constrained optimizer"
                    .to_string(),
            ],
        });
    }
    let (b, evals, conv, bound) = beta_box_search(ev, model, cfg, opts, rng, alpha)?;
    Ok(BetaStage {
        beta: b,
        fn_evals: evals,
        converged: conv,
        at_boundary: bound,
        warnings: Vec::new(),
    })
}

fn beta_box_search(
    ev: &mut Evaluator,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
    opts: &SearchOptions,
    rng: &mut ChaCha8Rng,
    alpha: &[f64],
) -> Result<(Vec<f64>, usize, bool, bool)> {
    let starts = optimize::sample_starts(&cfg.beta_ranges(model), cfg.multistart, rng);
    let (out, _) = optimize::multistart(
        |b| neg_or_inf(ev.h2(alpha, b)),
        model.space().beta_bounds(),
        &starts,
        cfg.method,
        opts,
    );
    if !out.f.is_finite() {
        return Err(Error::NoConvergence {
            starts: cfg.multistart,
        });
    }
    Ok((out.x, out.fn_evals, out.converged, out.at_boundary))
}

/// Three-step estimation: the two-step pass followed by a re-maximization of
/// the full criterion over alpha at the fitted drift.
pub fn fit_three_step(
    path: &ObservationPath,
    model: &DiffusionModel,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    let two = fit_two_step(path, model, cfg)?;
    if model.dim_beta() == 0 {
        // The third-step objective differs from h1 by a constant only, so the
        // two-step alpha' is already the exact maximizer.
        let mut fit = two;
        fit.mode = FitMode::ThreeStep;
        return Ok(fit);
    }
    let mut ev = Evaluator::new(model, path)?;
    let opts = cfg.search_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta = two.theta.beta.clone();
    let p = model.dim_alpha();
    if p == 0 {
        let mut fit = two;
        fit.mode = FitMode::ThreeStep;
        return Ok(fit);
    }
    let starts = optimize::sample_starts(&cfg.alpha_ranges(model), cfg.multistart, &mut rng);
    let (out, trace) = optimize::multistart(
        |a| neg_or_inf(ev.mgqlf(a, &beta)),
        model.space().alpha_bounds(),
        &starts,
        cfg.method,
        &opts,
    );
    if !out.f.is_finite() {
        return Err(Error::NoConvergence {
            starts: cfg.multistart,
        });
    }
    let summary = SearchSummary {
        converged: two.converged && out.converged,
        at_boundary: two.at_boundary || out.at_boundary,
        fn_evals: two.fn_evals + out.fn_evals,
        trace: trace.iter().map(|f| -f).collect(),
        warnings: two.warnings.clone(),
    };
    finish_fit(&mut ev, FitMode::ThreeStep, out.x, beta, summary)
}

fn mgqlf_const(n: usize, d: usize) -> f64 {
    let nd = n as f64 * d as f64;
    -0.5 * nd * (1.0 + (2.0 * std::f64::consts::PI).ln())
}

fn cov_from_eval(ev: &mut Evaluator, theta: &Theta, h_tilde: f64) -> Result<CovarianceEstimates> {
    let blocks = ev.fisher_blocks(&theta.alpha, &theta.beta)?;
    let n = ev.n() as f64;
    let d = ev.d() as f64;
    let p = theta.alpha.len();
    let q = theta.beta.len();

    let g1inv = if p > 0 {
        blocks
            .gamma1
            .clone()
            .cholesky()
            .ok_or(Error::SingularGamma { name: "Gamma1" })?
            .inverse()
    } else {
        DMatrix::zeros(0, 0)
    };
    let g2inv = if q > 0 {
        blocks
            .gamma2
            .clone()
            .cholesky()
            .ok_or(Error::SingularGamma { name: "Gamma2" })?
            .inverse()
    } else {
        DMatrix::zeros(0, 0)
    };

    let g1k = &g1inv * &blocks.k;
    let sigma_hh = 2.0 / d + blocks.k.dot(&g1k);
    let m = 1 + p + q;
    let mut sigma = DMatrix::zeros(m, m);
    sigma[(0, 0)] = sigma_hh;
    for i in 0..p {
        sigma[(0, 1 + i)] = -g1k[i];
        sigma[(1 + i, 0)] = -g1k[i];
        for j in 0..p {
            sigma[(1 + i, 1 + j)] = g1inv[(i, j)];
        }
    }
    for i in 0..q {
        for j in 0..q {
            sigma[(1 + p + i, 1 + p + j)] = g2inv[(i, j)];
        }
    }

    let stderr_h = h_tilde * (sigma_hh / n).sqrt();
    let stderr_alpha = (0..p).map(|i| (g1inv[(i, i)] / n).sqrt()).collect();
    let stderr_beta = (0..q)
        .map(|i| (g2inv[(i, i)] / (n * h_tilde)).sqrt())
        .collect();

    Ok(CovarianceEstimates {
        k: blocks.k.iter().copied().collect(),
        gamma1: blocks.gamma1,
        gamma2: blocks.gamma2,
        sigma,
        stderr_h,
        stderr_alpha,
        stderr_beta,
    })
}

/// Plug-in covariance at an already fitted value.
pub fn cov_estimates(
    path: &ObservationPath,
    model: &DiffusionModel,
    fit: &FitResult,
) -> Result<CovarianceEstimates> {
    let mut ev = Evaluator::new(model, path)?;
    cov_from_eval(&mut ev, &fit.theta, fit.h_tilde)
}

fn sigma_hh(fit: &FitResult) -> Result<f64> {
    let cov = fit
        .cov
        .as_ref()
        .ok_or(Error::SingularGamma { name: "Gamma1" })?;
    Ok(cov.sigma[(0, 0)])
}

/// Two-sided confidence interval for h with nominal miscoverage gamma:
/// h~ +- z_{gamma/2} (h~/sqrt(n)) sqrt(2/d + K^T Gamma_1^{-1} K).
pub fn ci_for_h(fit: &FitResult, gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let shh = sigma_hh(fit)?;
    let z = normal_quantile(1.0 - gamma / 2.0);
    let half = z * fit.h_tilde * (shh / fit.n as f64).sqrt();
    Ok((fit.h_tilde - half, fit.h_tilde + half))
}

/// Sampling-rate exponent estimate kappa~ = -log h~ / log n with its
/// delta-method standard error sqrt(Sigma_hh) / (sqrt(n) log n).
pub fn kappa_estimate(fit: &FitResult) -> Result<(f64, f64)> {
    if fit.n < 2 {
        return Err(Error::invalid("kappa needs n >= 2"));
    }
    let logn = (fit.n as f64).ln();
    let kappa = -fit.h_tilde.ln() / logn;
    let stderr = (sigma_hh(fit)? / fit.n as f64).sqrt() / logn;
    Ok((kappa, stderr))
}

/// Time-scale estimate tau~ = h~ / h0 for a known h0, with delta-method
/// standard error tau~ sqrt(Sigma_hh / n).
pub fn tau_estimate(fit: &FitResult, h0_known: f64) -> Result<(f64, f64)> {
    if !(h0_known.is_finite() && h0_known > 0.0) {
        return Err(Error::invalid("h0 must be positive"));
    }
    let tau = fit.h_tilde / h0_known;
    let stderr = tau * (sigma_hh(fit)? / fit.n as f64).sqrt();
    Ok((tau, stderr))
}

/// Returns the path with all coordinates multiplied by c > 0. Refitting the
/// scaled path evaluates the diffusion at the scaled states, which reproduces
/// the c^2 relation h~(c path) = (c^2/(n d)) sum S(c x, alpha~)^{-1}[(DX)^2];
/// for state-free S this is exactly c^2 h~(path).
pub fn rescale_observations(path: &ObservationPath, c: f64) -> Result<ObservationPath> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid("scale factor must be positive"));
    }
    path.scaled(c)
}

/// Standardized residuals e_j = a_{j-1}(alpha~)^{-1} (D_j X - h~ b_{j-1}) /
/// sqrt(h~), flattened n x d; approximately i.i.d. standard normal under the
/// fitted model.
pub fn residuals(
    path: &ObservationPath,
    model: &DiffusionModel,
    fit: &FitResult,
) -> Result<Vec<f64>> {
    if path.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "path dimension",
            expected: model.dim(),
            got: path.dim(),
        });
    }
    model.check_theta(&fit.theta)?;
    let d = model.dim();
    let n = path.n_increments();
    let h = fit.h_tilde;
    let sqrt_h = h.sqrt();
    let mut a = DMatrix::zeros(d, d);
    let mut b = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut out = Vec::with_capacity(n * d);
    for j in 0..n {
        let x = path.state(j);
        model
            .eval_a_into(x, &fit.theta.alpha, &mut a)
            .map_err(|e| match e {
                Error::NonFiniteCoefficient { .. } => Error::NonFiniteCoefficient { index: j },
                other => other,
            })?;
        model.eval_b_into(x, &fit.theta.alpha, &fit.theta.beta, &mut b, &mut scratch)?;
        let dx = path.increment(j + 1);
        let rhs = DVector::from_iterator(d, (0..d).map(|i| (dx[i] - h * b[i]) / sqrt_h));
        if d == 1 {
            if a[(0, 0)] == 0.0 {
                return Err(Error::SingularDiffusion { index: j });
            }
            out.push(rhs[0] / a[(0, 0)]);
        } else {
            let lu = a.clone().lu();
            let sol = lu
                .solve(&rhs)
                .ok_or(Error::SingularDiffusion { index: j })?;
            out.extend(sol.iter().copied());
        }
    }
    Ok(out)
}

/// Studentized deviations for normality diagnostics:
///
/// ```text
/// u_alpha = (-(1/n) d^2_alpha m(theta~))^{1/2} sqrt(n) (alpha~ - alpha0),
/// u_beta  = (-(1/(n h~)) d^2_beta m(theta~))^{1/2} sqrt(n h~) (beta~ - beta0),
/// ```
///
/// using the symmetric PSD eigen-root (any root gives the same |u|^2).
pub fn standardized_estimates(
    path: &ObservationPath,
    model: &DiffusionModel,
    fit: &FitResult,
    theta0: &Theta,
) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_theta(theta0)?;
    model.check_theta(&fit.theta)?;
    let mut ev = Evaluator::new(model, path)?;
    let n = ev.n() as f64;
    let p = model.dim_alpha();
    let q = model.dim_beta();
    let h = fit.h_tilde;
    let space = model.space();

    let u_alpha = if p == 0 {
        Vec::new()
    } else {
        let beta = fit.theta.beta.clone();
        let hess = numdiff::hessian(
            |a| ev.mgqlf(a, &beta),
            &fit.theta.alpha,
            Some(space.alpha_bounds()),
        )?;
        let m = hess.map(|v| -v / n);
        let root = sym_sqrt(&m, 1e-8).ok_or(Error::NonPDHessian { name: "alpha" })?;
        let dev = DVector::from_iterator(
            p,
            fit.theta
                .alpha
                .iter()
                .zip(&theta0.alpha)
                .map(|(a, a0)| (a - a0) * n.sqrt()),
        );
        (root * dev).iter().copied().collect()
    };

    let u_beta = if q == 0 {
        Vec::new()
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
        let m = hess.map(|v| -v / (n * h));
        let root = sym_sqrt(&m, 1e-8).ok_or(Error::NonPDHessian { name: "beta" })?;
        let dev = DVector::from_iterator(
            q,
            fit.theta
                .beta
                .iter()
                .zip(&theta0.beta)
                .map(|(b, b0)| (b - b0) * (n * h).sqrt()),
        );
        (root * dev).iter().copied().collect()
    };

    Ok((u_alpha, u_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood;
    use crate::model::{BuiltinCatalog, ParamSpace};
    use crate::simulate::{simulate_path, SimulationPlan, StepRule};
    use std::sync::Arc;

    fn sim(model: &DiffusionModel, theta: &Theta, n: usize, seed: u64) -> ObservationPath {
        let plan = SimulationPlan::new(n, StepRule::Power(2.0 / 3.0), 1.0, vec![1.0]).unwrap();
        simulate_path(model, theta, &plan, seed).unwrap()
    }

    /// d = 1, S = exp(alpha sin x), no drift parameters.
    fn sin_model() -> DiffusionModel {
        DiffusionModel::scalar_exp_linear(
            "sin-alpha",
            vec![Arc::new(|x: f64| x.sin()) as _],
            DriftCoeff::LinearInBeta {
                features: Vec::new(),
            },
            ParamSpace::alpha_only(vec![(-3.0, 3.0)]).unwrap(),
        )
        .unwrap()
    }

    /// d = 1, S = exp(alpha) (state-free), no drift parameters.
    fn const_model() -> DiffusionModel {
        DiffusionModel::scalar_exp_linear(
            "const-alpha",
            vec![Arc::new(|_: f64| 1.0) as _],
            DriftCoeff::LinearInBeta {
                features: Vec::new(),
            },
            ParamSpace::alpha_only(vec![(-3.0, 3.0)]).unwrap(),
        )
        .unwrap()
    }

    fn quick_cfg() -> OptimizerConfig {
        OptimizerConfig {
            multistart: 3,
            seed: 7,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn a_single_init_range_broadcasts_across_coordinates() {
        let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
        let cfg = OptimizerConfig {
            alpha_init: Some(vec![(-1.0, 1.0)]),
            beta_init: Some(vec![(-2.0, 0.0)]),
            ..OptimizerConfig::default()
        };
        cfg.validate(&model).unwrap();
        assert_eq!(cfg.alpha_ranges(&model), vec![(-1.0, 1.0); 3]);
        assert_eq!(cfg.beta_ranges(&model), vec![(-2.0, 0.0); 2]);

        // Two ranges for three coordinates is neither explicit nor broadcast.
        let bad = OptimizerConfig {
            alpha_init: Some(vec![(-1.0, 1.0), (0.0, 1.0)]),
            ..OptimizerConfig::default()
        };
        assert!(bad.validate(&model).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let model = sin_model();
        let mut cfg = OptimizerConfig {
            multistart: 0,
            ..OptimizerConfig::default()
        };
        assert!(cfg.validate(&model).is_err(), "multistart = 0 must fail");
        cfg.multistart = 4;
        cfg.alpha_init = Some(vec![(0.0, 1.0), (0.0, 1.0)]);
        assert!(
            cfg.validate(&model).is_err(),
            "wrong alpha_init length must fail"
        );
        cfg.alpha_init = Some(vec![(0.0, 1.0)]);
        assert!(cfg.validate(&model).is_ok());
    }

    #[test]
    fn joint_fit_matches_grid_argmax_without_drift_params() {
        let model = sin_model();
        let truth = Theta::new(vec![1.2], vec![]);
        let path = sim(&model, &truth, 400, 11);
        let fit = fit_joint(&path, &model, &quick_cfg()).unwrap();

        // With no drift parameters the joint criterion reduces to h1, so a
        // fine scan of h1 over the box is an independent oracle.
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut a = -3.0;
        while a <= 3.0 {
            let v = likelihood::h1(&path, &model, &[a]).unwrap();
            if v > best.0 {
                best = (v, a);
            }
            a += 1e-3;
        }
        assert!(
            (fit.theta.alpha[0] - best.1).abs() < 5e-3,
            "optimizer {} vs grid {}",
            fit.theta.alpha[0],
            best.1
        );
        assert!(fit.converged);
        assert!(fit.h_tilde > 0.0);
    }

    #[test]
    fn two_step_beta_is_stationary_for_h2() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 600, 3);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();
        let alpha = fit.theta.alpha.clone();
        let grad = crate::numdiff::gradient(
            |b| likelihood::h2(&path, &model, &alpha, b),
            &fit.theta.beta,
            None,
        )
        .unwrap();
        for (k, g) in grad.iter().enumerate() {
            assert!(
                g.abs() < 1e-5 * (1.0 + fit.h2.abs()),
                "h2 gradient coordinate {k} is {g}"
            );
        }
    }

    #[test]
    fn joint_criterion_dominates_two_step() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 500, 5);
        let cfg = quick_cfg();
        let joint = fit_joint(&path, &model, &cfg).unwrap();
        let two = fit_two_step(&path, &model, &cfg).unwrap();
        let three = fit_three_step(&path, &model, &cfg).unwrap();
        assert!(
            joint.loglik >= two.loglik - 1e-7 * (1.0 + two.loglik.abs()),
            "joint {} < two-step {}",
            joint.loglik,
            two.loglik
        );
        assert!(
            three.loglik >= two.loglik - 1e-7 * (1.0 + two.loglik.abs()),
            "three-step {} < two-step {}",
            three.loglik,
            two.loglik
        );
        assert_eq!(three.mode, FitMode::ThreeStep);
        assert_eq!(three.theta.beta, two.theta.beta, "third step keeps beta'");
    }

    #[test]
    fn three_step_reduces_to_two_step_without_drift_params() {
        let model = sin_model();
        let truth = Theta::new(vec![1.2], vec![]);
        let path = sim(&model, &truth, 300, 2);
        let cfg = quick_cfg();
        let two = fit_two_step(&path, &model, &cfg).unwrap();
        let three = fit_three_step(&path, &model, &cfg).unwrap();
        assert_eq!(three.mode, FitMode::ThreeStep);
        assert_eq!(
            two.theta.alpha, three.theta.alpha,
            "alpha must be bit-identical"
        );
        assert_eq!(two.loglik.to_bits(), three.loglik.to_bits());
    }

    #[test]
    fn fits_are_deterministic() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 400, 9);
        let cfg = quick_cfg();
        let a = fit_joint(&path, &model, &cfg).unwrap();
        let b = fit_joint(&path, &model, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn covariance_blocks_have_exact_zero_structure() {
        let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
        let truth = Theta::new(vec![0.0, 1.0, -0.5], vec![-1.0, 0.0]);
        let path = sim(&model, &truth, 800, 21);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();
        let cov = fit.cov.as_ref().expect("covariance available");
        let p = 3;
        let q = 2;
        assert_eq!(cov.sigma.nrows(), 1 + p + q);
        // (h, beta) and (alpha, beta) blocks vanish identically.
        for i in 0..1 + p {
            for j in 0..q {
                assert_eq!(cov.sigma[(i, 1 + p + j)], 0.0);
                assert_eq!(cov.sigma[(1 + p + j, i)], 0.0);
            }
        }
        // Symmetry and the stderr identities.
        for i in 0..1 + p + q {
            for j in 0..i {
                assert!((cov.sigma[(i, j)] - cov.sigma[(j, i)]).abs() < 1e-12);
            }
        }
        let n = fit.n as f64;
        for (i, se) in cov.stderr_alpha.iter().enumerate() {
            assert!((se * se * n - cov.sigma[(1 + i, 1 + i)]).abs() < 1e-10);
        }
        for (i, se) in cov.stderr_beta.iter().enumerate() {
            let expect = cov.sigma[(1 + p + i, 1 + p + i)] / (n * fit.h_tilde);
            assert!((se * se - expect).abs() < 1e-12 * (1.0 + expect));
        }
        assert!((cov.stderr_h - fit.h_tilde * (cov.sigma[(0, 0)] / n).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn confidence_interval_width_behaves() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 500, 13);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();

        let (lo, hi) = ci_for_h(&fit, 1.0).unwrap();
        assert_eq!(lo, fit.h_tilde);
        assert_eq!(hi, fit.h_tilde);

        let (l5, h5) = ci_for_h(&fit, 0.05).unwrap();
        let (l32, h32) = ci_for_h(&fit, 0.32).unwrap();
        assert!(h5 - l5 > h32 - l32, "95% interval must be wider than 68%");
        assert!((h5 - fit.h_tilde) - (fit.h_tilde - l5) < 1e-12);
        assert!(ci_for_h(&fit, 0.0).is_err());
        assert!(ci_for_h(&fit, 1.5).is_err());
    }

    #[test]
    fn kappa_and_tau_satisfy_their_defining_identities() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 500, 17);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();

        let (kappa, se_k) = kappa_estimate(&fit).unwrap();
        assert!(
            ((fit.n as f64).powf(-kappa) - fit.h_tilde).abs() < 1e-12 * fit.h_tilde,
            "n^(-kappa) must reproduce h~"
        );
        assert!(se_k > 0.0);

        let h0 = (500f64).powf(-2.0 / 3.0);
        let (tau, se_t) = tau_estimate(&fit, h0).unwrap();
        assert!((tau * h0 - fit.h_tilde).abs() < 1e-15);
        let shh = fit.cov.as_ref().unwrap().sigma[(0, 0)];
        assert!((se_t - tau * (shh / fit.n as f64).sqrt()).abs() < 1e-15);
        assert!(tau_estimate(&fit, 0.0).is_err());
    }

    #[test]
    fn rescaling_multiplies_h_by_c_squared_for_state_free_diffusion() {
        let model = const_model();
        let truth = Theta::new(vec![0.4], vec![]);
        let path = sim(&model, &truth, 300, 23);
        let scaled = rescale_observations(&path, 2.5).unwrap();
        for alpha in [-1.0, 0.0, 0.7] {
            let h = likelihood::h_of_alpha(&path, &model, &[alpha]).unwrap();
            let hs = likelihood::h_of_alpha(&scaled, &model, &[alpha]).unwrap();
            assert!(
                (hs - 2.5 * 2.5 * h).abs() < 1e-12 * hs,
                "state-free S must give the exact c^2 relation"
            );
        }
        assert!(rescale_observations(&path, -1.0).is_err());
        assert!(rescale_observations(&path, 0.0).is_err());
    }

    #[test]
    fn residuals_look_standard_normal_under_the_fitted_model() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 2000, 29);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();
        let eps = residuals(&path, &model, &fit).unwrap();
        assert_eq!(eps.len(), 2000);
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (eps.len() - 1) as f64;
        assert!(mean.abs() < 0.1, "residual mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "residual variance {var}");
    }

    #[test]
    fn standardized_estimates_vanish_at_the_fitted_value() {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 500, 31);
        let fit = fit_two_step(&path, &model, &quick_cfg()).unwrap();
        let (ua, ub) = standardized_estimates(&path, &model, &fit, &fit.theta).unwrap();
        assert_eq!(ua.len(), 1);
        assert_eq!(ub.len(), 2);
        assert!(ua.iter().all(|v| v.abs() < 1e-9));
        assert!(ub.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn state_free_feature_gives_singular_gamma1() {
        // With d = 1 and a constant diffusion feature, h and alpha are
        // confounded: Gamma_1 = avg(phi^2)/2 - avg(phi)^2/2 = 0.
        let model = const_model();
        let truth = Theta::new(vec![0.4], vec![]);
        let path = sim(&model, &truth, 300, 37);
        let fit = fit_joint(&path, &model, &quick_cfg()).unwrap();
        assert!(fit.cov.is_none(), "covariance must be unavailable");
        assert!(
            fit.warnings.iter().any(|w| w.contains("Gamma1")),
            "warning should name the singular block: {:?}",
            fit.warnings
        );
        match cov_estimates(&path, &model, &fit) {
            Err(Error::SingularGamma { name }) => assert_eq!(name, "Gamma1"),
            other => panic!("expected SingularGamma, got {other:?}"),
        }
    }

    #[test]
    fn boundary_optimum_clears_the_convergence_flag() {
        let model = sin_model();
        let truth = Theta::new(vec![1.2], vec![]);
        let path = sim(&model, &truth, 400, 41);
        // Exclude the interior optimum (near 1.2) from the box.
        let boxed = sin_model()
            .with_space(ParamSpace::alpha_only(vec![(-3.0, 0.0)]).unwrap())
            .unwrap();
        let cfg = OptimizerConfig {
            alpha_init: Some(vec![(-2.0, -0.1)]),
            ..quick_cfg()
        };
        let fit = fit_joint(&path, &boxed, &cfg).unwrap();
        assert!(fit.at_boundary, "optimum must sit on the box edge");
        assert!(!fit.converged);
        assert!((fit.theta.alpha[0] - 0.0).abs() < 1e-6);
    }
}
