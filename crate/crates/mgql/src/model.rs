//! Model descriptions for ergodic diffusions
//!
//! ```text
//! dX_t = sqrt(tau) a(X_t, alpha) dw_t + tau b(X_t, beta) dt,
//! ```
//!
//! observed on an equally spaced grid whose stepsize is not known to the
//! statistician. Estimation works with S = a a^T and only ever identifies the
//! product h = tau * h0, so the model itself carries no time scale.
//!
//! Two coefficient encodings are supported. The scalar exponential-linear
//! form `a = exp(0.5 * sum_k alpha_k phi_k(x))` covers the builtin catalog and
//! admits fast likelihood evaluation; arbitrary matrix closures cover
//! everything else at the cost of per-observation linear algebra.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::ObservationPath;

/// Scalar state feature `phi_k` for exponential-linear diffusions.
pub type ScalarFeature = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Drift feature `psi_k`: writes the d-vector `psi_k(x)` into `out`.
pub type VectorFeature = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Full matrix diffusion coefficient: writes `a(x, alpha)` (d x d) into `out`.
pub type MatrixCoeff = Arc<dyn Fn(&[f64], &[f64], &mut DMatrix<f64>) + Send + Sync>;

/// General drift coefficient: writes `b(x, alpha, beta)` (d-vector) into `out`.
pub type GeneralDrift = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Rectangular parameter domain Theta_alpha x Theta_beta with finite bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    alpha: Vec<(f64, f64)>,
    beta: Vec<(f64, f64)>,
}

impl ParamSpace {
    /// Builds a box domain. Every interval must be finite with `lo < hi` and
    /// at least one of the two blocks must be non-empty.
    pub fn new(alpha: Vec<(f64, f64)>, beta: Vec<(f64, f64)>) -> Result<Self> {
        if alpha.is_empty() && beta.is_empty() {
            return Err(Error::invalid(
                "parameter space needs at least one coordinate",
            ));
        }
        for (name, block) in [("alpha", &alpha), ("beta", &beta)] {
            for (i, &(lo, hi)) in block.iter().enumerate() {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::invalid(format!(
                        "{name} bound {i} must be a finite interval with lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(ParamSpace { alpha, beta })
    }

    /// Domain with only diffusion parameters.
    pub fn alpha_only(alpha: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(alpha, Vec::new())
    }

    pub fn dim_alpha(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim_beta(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bounds(&self) -> &[(f64, f64)] {
        &self.alpha
    }

    pub fn beta_bounds(&self) -> &[(f64, f64)] {
        &self.beta
    }

    pub fn contains(&self, theta: &Theta) -> bool {
        inside(&self.alpha, &theta.alpha) && inside(&self.beta, &theta.beta)
    }

    /// Componentwise projection onto the box.
    pub fn project(&self, theta: &Theta) -> Theta {
        Theta {
            alpha: clamp_into(&self.alpha, &theta.alpha),
            beta: clamp_into(&self.beta, &theta.beta),
        }
    }
}

fn inside(bounds: &[(f64, f64)], x: &[f64]) -> bool {
    bounds.len() == x.len()
        && bounds
            .iter()
            .zip(x)
            .all(|(&(lo, hi), &v)| v >= lo && v <= hi)
}

fn clamp_into(bounds: &[(f64, f64)], x: &[f64]) -> Vec<f64> {
    bounds
        .iter()
        .zip(x)
        .map(|(&(lo, hi), &v)| v.clamp(lo, hi))
        .collect()
}

/// Parameter value theta = (alpha, beta).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Theta { alpha, beta }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
    }
}

/// Diffusion coefficient a(x, alpha).
#[derive(Clone)]
pub enum DiffusionCoeff {
    /// d = 1 with S = a^2 = exp(sum_k alpha_k phi_k(x)). Always positive, and
    /// log S, S^{-1} dS/dalpha_k = phi_k(x) come for free.
    ScalarExpLinear { features: Vec<ScalarFeature> },
    /// Arbitrary d x d coefficient; S = a a^T is formed (and symmetrized) on
    /// evaluation.
    Matrix { dim: usize, coeff: MatrixCoeff },
}

/// Drift coefficient b(x, alpha, beta).
#[derive(Clone)]
pub enum DriftCoeff {
    /// b(x, beta) = sum_k beta_k psi_k(x). The two-step drift estimator is
    /// explicit for this form.
    LinearInBeta { features: Vec<VectorFeature> },
    /// Arbitrary drift, possibly depending on alpha.
    General { coeff: GeneralDrift },
}

impl DriftCoeff {
    /// Convenience wrapper for scalar (d = 1) linear drifts.
    pub fn linear_scalar(features: Vec<ScalarFeature>) -> Self {
        let lifted = features
            .into_iter()
            .map(|f| Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = f(x[0])) as VectorFeature)
            .collect();
        DriftCoeff::LinearInBeta { features: lifted }
    }
}

/// A parametric diffusion model tied to its parameter domain.
#[derive(Clone)]
pub struct DiffusionModel {
    label: String,
    dim: usize,
    diffusion: DiffusionCoeff,
    drift: DriftCoeff,
    space: ParamSpace,
    alpha_names: Vec<String>,
    beta_names: Vec<String>,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("dim_alpha", &self.dim_alpha())
            .field("dim_beta", &self.dim_beta())
            .finish()
    }
}

impl DiffusionModel {
    /// One-dimensional model with exponential-linear diffusion. The number of
    /// diffusion features must match `space.dim_alpha()`.
    pub fn scalar_exp_linear(
        label: impl Into<String>,
        features: Vec<ScalarFeature>,
        drift: DriftCoeff,
        space: ParamSpace,
    ) -> Result<Self> {
        if features.len() != space.dim_alpha() {
            return Err(Error::DimensionMismatch {
                what: "diffusion features vs alpha bounds",
                expected: space.dim_alpha(),
                got: features.len(),
            });
        }
        Self::finish(
            label.into(),
            1,
            DiffusionCoeff::ScalarExpLinear { features },
            drift,
            space,
        )
    }

    /// General model in dimension `dim` with a matrix diffusion coefficient.
    pub fn general(
        label: impl Into<String>,
        dim: usize,
        coeff: MatrixCoeff,
        drift: DriftCoeff,
        space: ParamSpace,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        Self::finish(
            label.into(),
            dim,
            DiffusionCoeff::Matrix { dim, coeff },
            drift,
            space,
        )
    }

    fn finish(
        label: String,
        dim: usize,
        diffusion: DiffusionCoeff,
        drift: DriftCoeff,
        space: ParamSpace,
    ) -> Result<Self> {
        if let DriftCoeff::LinearInBeta { features } = &drift {
            if features.len() != space.dim_beta() {
                return Err(Error::DimensionMismatch {
                    what: "drift features vs beta bounds",
                    expected: space.dim_beta(),
                    got: features.len(),
                });
            }
        }
        let alpha_names = (1..=space.dim_alpha())
            .map(|k| format!("alpha{k}"))
            .collect();
        let beta_names = (1..=space.dim_beta()).map(|k| format!("beta{k}")).collect();
        Ok(DiffusionModel {
            label,
            dim,
            diffusion,
            drift,
            space,
            alpha_names,
            beta_names,
        })
    }

    /// Replaces the default coordinate names used in reports.
    pub fn with_param_names(
        mut self,
        alpha_names: Vec<String>,
        beta_names: Vec<String>,
    ) -> Result<Self> {
        if alpha_names.len() != self.dim_alpha() || beta_names.len() != self.dim_beta() {
            return Err(Error::invalid(
                "parameter name lists must match block dimensions",
            ));
        }
        self.alpha_names = alpha_names;
        self.beta_names = beta_names;
        Ok(self)
    }

    /// Replaces the parameter domain (dimensions must be unchanged).
    pub fn with_space(mut self, space: ParamSpace) -> Result<Self> {
        if space.dim_alpha() != self.dim_alpha() || space.dim_beta() != self.dim_beta() {
            return Err(Error::invalid(
                "replacement space must keep block dimensions",
            ));
        }
        self.space = space;
        Ok(self)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// State dimension d.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dim_alpha(&self) -> usize {
        self.space.dim_alpha()
    }

    pub fn dim_beta(&self) -> usize {
        self.space.dim_beta()
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn diffusion(&self) -> &DiffusionCoeff {
        &self.diffusion
    }

    pub fn drift(&self) -> &DriftCoeff {
        &self.drift
    }

    pub fn alpha_names(&self) -> &[String] {
        &self.alpha_names
    }

    pub fn beta_names(&self) -> &[String] {
        &self.beta_names
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.alpha.len() != self.dim_alpha() {
            return Err(Error::DimensionMismatch {
                what: "alpha",
                expected: self.dim_alpha(),
                got: theta.alpha.len(),
            });
        }
        if theta.beta.len() != self.dim_beta() {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: self.dim_beta(),
                got: theta.beta.len(),
            });
        }
        if !theta.is_finite() {
            return Err(Error::invalid("theta contains non-finite coordinates"));
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// log S(x, alpha) for the exponential-linear form, if applicable.
    pub(crate) fn log_s_scalar(&self, x: f64, alpha: &[f64]) -> f64 {
        match &self.diffusion {
            DiffusionCoeff::ScalarExpLinear { features } => {
                features.iter().zip(alpha).map(|(phi, &a)| a * phi(x)).sum()
            }
            DiffusionCoeff::Matrix { .. } => unreachable!("scalar path on matrix coefficient"),
        }
    }

    /// Evaluates a(x, alpha) into `out` (d x d).
    pub fn eval_a_into(&self, x: &[f64], alpha: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.check_state(x)?;
        match &self.diffusion {
            DiffusionCoeff::ScalarExpLinear { .. } => {
                out.fill(0.0);
                out[(0, 0)] = (0.5 * self.log_s_scalar(x[0], alpha)).exp();
            }
            DiffusionCoeff::Matrix { coeff, .. } => coeff(x, alpha, out),
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient { index: usize::MAX });
        }
        Ok(())
    }

    pub fn eval_a(&self, x: &[f64], alpha: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.eval_a_into(x, alpha, &mut out)?;
        Ok(out)
    }

    /// Evaluates S(x, alpha) = a a^T, symmetrized entry by entry so callers
    /// may rely on exact symmetry.
    pub fn eval_s(&self, x: &[f64], alpha: &[f64]) -> Result<DMatrix<f64>> {
        let a = self.eval_a(x, alpha)?;
        let mut s = &a * a.transpose();
        for i in 0..self.dim {
            for j in 0..i {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        Ok(s)
    }

    /// Evaluates b(x, alpha, beta) into `out` (length d).
    pub fn eval_b_into(
        &self,
        x: &[f64],
        alpha: &[f64],
        beta: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        self.check_state(x)?;
        match &self.drift {
            DriftCoeff::LinearInBeta { features } => {
                out.fill(0.0);
                for (psi, &bk) in features.iter().zip(beta) {
                    psi(x, scratch);
                    for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                        *o += bk * s;
                    }
                }
            }
            DriftCoeff::General { coeff } => coeff(x, alpha, beta, out),
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient { index: usize::MAX });
        }
        Ok(())
    }

    pub fn eval_b(&self, x: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.eval_b_into(x, alpha, beta, &mut out, &mut scratch)?;
        Ok(out)
    }
}

/// Worst-case Gershgorin lower bound on the eigenvalues of S(x, alpha) over
/// all states of a path: min_j min_i (S_ii - sum_{l != i} |S_il|). A positive
/// value certifies uniform positive definiteness on the sample.
pub fn gershgorin_lower_bound(
    model: &DiffusionModel,
    path: &ObservationPath,
    alpha: &[f64],
) -> Result<f64> {
    if path.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "path dimension",
            expected: model.dim(),
            got: path.dim(),
        });
    }
    let mut bound = f64::INFINITY;
    for (j, x) in path.states().enumerate() {
        let s = model.eval_s(x, alpha).map_err(|e| match e {
            Error::NonFiniteCoefficient { .. } => Error::NonFiniteCoefficient { index: j },
            other => other,
        })?;
        for i in 0..model.dim() {
            let off: f64 = (0..model.dim())
                .filter(|&l| l != i)
                .map(|l| s[(i, l)].abs())
                .sum();
            bound = bound.min(s[(i, i)] - off);
        }
    }
    Ok(bound)
}

/// Builtin catalog of one-dimensional models: seven exponential-linear
/// diffusion families over the features {cos x, sin x, cos x sin x} and three
/// linear drift families over {x, 1}.
pub struct BuiltinCatalog;

const DIFF_KEYS: [&str; 7] = [
    "diff1", "diff2", "diff3", "diff4", "diff5", "diff6", "diff7",
];
const DRIFT_KEYS: [&str; 3] = ["drif1", "drif2", "drif3"];

fn phi_cos(x: f64) -> f64 {
    x.cos()
}

fn phi_sin(x: f64) -> f64 {
    x.sin()
}

fn phi_cossin(x: f64) -> f64 {
    x.cos() * x.sin()
}

fn psi_id(x: f64) -> f64 {
    x
}

fn psi_one(_: f64) -> f64 {
    1.0
}

/// Feature selection per diffusion key, as indices into (cos, sin, cos*sin).
fn diff_selection(key: &str) -> Option<&'static [usize]> {
    match key {
        "diff1" => Some(&[0, 1, 2]),
        "diff2" => Some(&[0, 1]),
        "diff3" => Some(&[0, 2]),
        "diff4" => Some(&[1, 2]),
        "diff5" => Some(&[0]),
        "diff6" => Some(&[1]),
        "diff7" => Some(&[2]),
        _ => None,
    }
}

/// Feature selection per drift key, as indices into (x, 1).
fn drift_selection(key: &str) -> Option<&'static [usize]> {
    match key {
        "drif1" => Some(&[0, 1]),
        "drif2" => Some(&[0]),
        "drif3" => Some(&[1]),
        _ => None,
    }
}

impl BuiltinCatalog {
    pub fn diffusion_keys() -> &'static [&'static str] {
        &DIFF_KEYS
    }

    pub fn drift_keys() -> &'static [&'static str] {
        &DRIFT_KEYS
    }

    pub fn dim_alpha(diff_key: &str) -> Result<usize> {
        diff_selection(diff_key)
            .map(<[usize]>::len)
            .ok_or_else(|| Error::invalid(format!("unknown diffusion key {diff_key:?}")))
    }

    pub fn dim_beta(drift_key: &str) -> Result<usize> {
        drift_selection(drift_key)
            .map(<[usize]>::len)
            .ok_or_else(|| Error::invalid(format!("unknown drift key {drift_key:?}")))
    }

    /// Assembles the builtin model `diff_key + drift_key` with the default
    /// box domain [-10, 10] per coordinate.
    pub fn model(diff_key: &str, drift_key: &str) -> Result<DiffusionModel> {
        const PHIS: [fn(f64) -> f64; 3] = [phi_cos, phi_sin, phi_cossin];
        const PHI_NAMES: [&str; 3] = ["alpha1", "alpha2", "alpha3"];
        const PSIS: [fn(f64) -> f64; 2] = [psi_id, psi_one];
        const PSI_NAMES: [&str; 2] = ["beta1", "beta2"];

        let dsel = diff_selection(diff_key)
            .ok_or_else(|| Error::invalid(format!("unknown diffusion key {diff_key:?}")))?;
        let bsel = drift_selection(drift_key)
            .ok_or_else(|| Error::invalid(format!("unknown drift key {drift_key:?}")))?;

        let features: Vec<ScalarFeature> = dsel
            .iter()
            .map(|&i| Arc::new(PHIS[i]) as ScalarFeature)
            .collect();
        let drift_feats: Vec<ScalarFeature> = bsel
            .iter()
            .map(|&i| Arc::new(PSIS[i]) as ScalarFeature)
            .collect();
        let space = ParamSpace::new(
            vec![(-10.0, 10.0); dsel.len()],
            vec![(-10.0, 10.0); bsel.len()],
        )?;
        DiffusionModel::scalar_exp_linear(
            format!("{diff_key}+{drift_key}"),
            features,
            DriftCoeff::linear_scalar(drift_feats),
            space,
        )?
        .with_param_names(
            dsel.iter().map(|&i| PHI_NAMES[i].to_string()).collect(),
            bsel.iter().map(|&i| PSI_NAMES[i].to_string()).collect(),
        )
    }
}
