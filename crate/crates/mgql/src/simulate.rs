//! Path simulation and the observation container.
//!
//! Observations are generated by Euler-Maruyama on a grid `refine` times
//! finer than the observation grid, then subsampled. The scheme only ever
//! uses the product tau * h0 through a single effective substep, so two plans
//! with equal tau * h0 and equal seeds produce bitwise identical paths; the
//! estimators can only recover that product, and simulation respects the same
//! degeneracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiffusionModel, Theta};

pub const DEFAULT_REFINE: usize = 10;
pub const DEFAULT_EXPLOSION_CAP: f64 = 1e8;
pub const META_SCHEMA_VERSION: u32 = 1;

/// Observation stepsize rule: a literal value or h0 = n^(-kappa).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Explicit(f64),
    Power(f64),
}

/// Everything needed to generate one synthetic record of length n.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub n: usize,
    pub rule: StepRule,
    pub tau: f64,
    pub x0: Vec<f64>,
    pub refine: usize,
    pub explosion_cap: f64,
}

impl SimulationPlan {
    pub fn new(n: usize, rule: StepRule, tau: f64, x0: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("plan needs at least one observation step"));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0 must be a non-empty finite vector"));
        }
        match rule {
            StepRule::Explicit(h0) if !(h0.is_finite() && h0 > 0.0) => {
                return Err(Error::invalid(format!("h0 must be positive, got {h0}")));
            }
            StepRule::Power(kappa) if !(kappa.is_finite() && kappa > 0.0) => {
                return Err(Error::invalid(format!(
                    "kappa must be positive, got {kappa}"
                )));
            }
            _ => {}
        }
        Ok(SimulationPlan {
            n,
            rule,
            tau,
            x0,
            refine: DEFAULT_REFINE,
            explosion_cap: DEFAULT_EXPLOSION_CAP,
        })
    }

    pub fn with_refine(mut self, refine: usize) -> Result<Self> {
        if refine == 0 {
            return Err(Error::invalid("refine must be at least 1"));
        }
        self.refine = refine;
        Ok(self)
    }

    pub fn with_explosion_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(Error::invalid("explosion cap must be positive"));
        }
        self.explosion_cap = cap;
        Ok(self)
    }

    /// Observation stepsize h0.
    pub fn h0(&self) -> f64 {
        match self.rule {
            StepRule::Explicit(h0) => h0,
            StepRule::Power(kappa) => (self.n as f64).powf(-kappa),
        }
    }

    /// Observation horizon n * h0; the ergodic design needs this large.
    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.h0()
    }

    /// Design product n * h0^2; the high-frequency design needs this small.
    pub fn design_product(&self) -> f64 {
        let h0 = self.h0();
        self.n as f64 * h0 * h0
    }
}

/// Provenance attached to simulated paths and carried through CSV sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathMeta {
    pub schema_version: u32,
    pub model: String,
    pub n: usize,
    pub h0: f64,
    pub tau: f64,
    pub refine: usize,
    pub seed: u64,
    pub theta: Theta,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub design_product: f64,
}

/// An equally spaced record X_{t_0}, ..., X_{t_n} in R^d, stored flat in time
/// order. The stepsize itself is deliberately absent: estimation never sees
/// it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPath {
    dim: usize,
    values: Vec<f64>,
    meta: Option<PathMeta>,
}

impl ObservationPath {
    /// Wraps raw values (length must be a multiple of `dim`, at least two
    /// states, all finite).
    pub fn from_values(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("path dimension must be at least 1"));
        }
        if values.len() % dim != 0 || values.len() / dim < 2 {
            return Err(Error::invalid(format!(
                "path needs k*{dim} values with k >= 2, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadRecord {
                row: pos / dim,
                reason: "non-finite state value".to_string(),
            });
        }
        Ok(ObservationPath {
            dim,
            values,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: PathMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn meta(&self) -> Option<&PathMeta> {
        self.meta.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of increments n (one less than the number of states).
    pub fn n_increments(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    /// State X_{t_j}, j = 0..=n.
    pub fn state(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Lagged states X_{t_0}, ..., X_{t_{n-1}} (the summation points of every
    /// quasi-likelihood term).
    pub fn lagged_states(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim).take(self.n_increments())
    }

    /// Increment Delta_j X = X_{t_j} - X_{t_{j-1}} for j = 1..=n.
    pub fn increment(&self, j: usize) -> Vec<f64> {
        let prev = (j - 1) * self.dim;
        let cur = j * self.dim;
        (0..self.dim)
            .map(|i| self.values[cur + i] - self.values[prev + i])
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Returns the path with every coordinate multiplied by `c` (metadata is
    /// dropped: the provenance no longer describes the data).
    pub fn scaled(&self, c: f64) -> Result<ObservationPath> {
        if !(c.is_finite() && c != 0.0) {
            return Err(Error::invalid("scale factor must be finite and nonzero"));
        }
        ObservationPath::from_values(self.dim, self.values.iter().map(|v| c * v).collect())
    }
}

/// Standard Wiener increments: an n x dim block of independent N(0, h) draws,
/// flattened in time order.
pub fn dw_increments(dim: usize, n: usize, h: f64, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 || n == 0 {
        return Err(Error::invalid("dw_increments needs dim >= 1 and n >= 1"));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!(
            "stepsize must be positive, got {h}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = h.sqrt();
    Ok((0..n * dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Euler-Maruyama simulation of the model under `theta`, observed every
/// `refine` substeps. The coefficients are not required to lie in the model's
/// box; only dimensions are checked.
pub fn simulate_path(
    model: &DiffusionModel,
    theta: &Theta,
    plan: &SimulationPlan,
    seed: u64,
) -> Result<ObservationPath> {
    model.check_theta(theta)?;
    let d = model.dim();
    if plan.x0.len() != d {
        return Err(Error::DimensionMismatch {
            what: "x0",
            expected: d,
            got: plan.x0.len(),
        });
    }

    // Single product tau * h0: the generator must not depend on the two
    // factors separately.
    let step = plan.tau * plan.h0();
    let heff = step / plan.refine as f64;
    let sqrt_heff = heff.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = plan.x0.clone();
    let mut a = nalgebra::DMatrix::zeros(d, d);
    let mut b = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut values = Vec::with_capacity((plan.n + 1) * d);
    values.extend_from_slice(&x);

    for j in 1..=plan.n {
        for _ in 0..plan.refine {
            model
                .eval_a_into(&x, &theta.alpha, &mut a)
                .map_err(|e| match e {
                    Error::NonFiniteCoefficient { .. } => Error::NonFiniteCoefficient { index: j },
                    other => other,
                })?;
            model
                .eval_b_into(&x, &theta.alpha, &theta.beta, &mut b, &mut scratch)
                .map_err(|e| match e {
                    Error::NonFiniteCoefficient { .. } => Error::NonFiniteCoefficient { index: j },
                    other => other,
                })?;
            for zi in z.iter_mut() {
                *zi = rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..d {
                let mut noise = 0.0;
                for k in 0..d {
                    noise += a[(i, k)] * z[k];
                }
                x[i] += sqrt_heff * noise + heff * b[i];
            }
            if x.iter()
                .any(|v| !v.is_finite() || v.abs() > plan.explosion_cap)
            {
                return Err(Error::PathExplosion {
                    step: j,
                    cap: plan.explosion_cap,
                });
            }
        }
        values.extend_from_slice(&x);
    }

    let meta = PathMeta {
        schema_version: META_SCHEMA_VERSION,
        model: model.label().to_string(),
        n: plan.n,
        h0: plan.h0(),
        tau: plan.tau,
        refine: plan.refine,
        seed,
        theta: theta.clone(),
        x0: plan.x0.clone(),
        horizon: plan.horizon(),
        design_product: plan.design_product(),
    };
    Ok(ObservationPath::from_values(d, values)?.with_meta(meta))
}
