//! Gaussian quasi-likelihood for a path observed at an unknown stepsize.
//!
//! With S_{j-1}(alpha) = (a a^T)(X_{t_{j-1}}, alpha) and b_{j-1}(theta) the
//! drift at the lagged state, the log quasi-likelihood at stepsize h is
//!
//! ```text
//! H(theta; h) = -1/2 sum_j { log|2 pi h S_{j-1}|
//!                            + (1/h) S_{j-1}^{-1}[(D_j X - h b_{j-1})^{x2}] },
//! ```
//!
//! where M[u, v] = u^T M v. Profiling out h yields the explicit stepsize
//!
//! ```text
//! h(alpha) = (1/(n d)) sum_j S_{j-1}^{-1}[(D_j X)^{x2}],
//! ```
//!
//! and plugging it back gives the modified quasi-likelihood
//!
//! ```text
//! m(theta) = H(theta; h(alpha))
//!          = -(n d / 2)(1 + log 2 pi) + h1(alpha) + h2(alpha, beta),
//! h1(alpha) = -1/2 { sum_j log|S_{j-1}| + n d log h(alpha) },
//! h2(alpha, beta) = sum_j S_{j-1}^{-1}[D_j X, b_{j-1}]
//!                   - (h(alpha)/2) sum_j S_{j-1}^{-1}[b_{j-1}^{x2}].
//! ```
//!
//! The expanded form is what gets evaluated; the compositional identity is
//! kept alive by tests. An [`Evaluator`] prepares per-path features once and
//! memoizes every alpha-dependent per-observation quantity, so optimizer
//! sweeps that vary beta at fixed alpha cost one pass of scalar work.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{DiffusionCoeff, DiffusionModel, DriftCoeff, Theta};
use crate::numdiff;
use crate::simulate::ObservationPath;
use crate::util::{csum, Accum};

/// Which criterion to differentiate in [`grad_hessian`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// h1(alpha); derivatives with respect to alpha.
    H1,
    /// h2(alpha, beta); derivatives with respect to (alpha, beta) stacked.
    H2,
    /// The full modified quasi-likelihood; derivatives in (alpha, beta).
    Mgqlf,
}

/// Gradient and (optionally) Hessian of one criterion.
#[derive(Clone, Debug)]
pub struct Derivs {
    pub gradient: Vec<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

/// Plug-in information blocks for the asymptotic covariance: K, Gamma_1 and
/// Gamma_2 in the notation of the limit theorem for (h, alpha, beta).
#[derive(Clone, Debug)]
pub struct FisherBlocks {
    /// K_k = (1/d) avg_j tr(S^{-1} d_k S).
    pub k: DVector<f64>,
    /// (Gamma_1)_{kl} = (1/2) avg_j tr(S^{-1} d_k S S^{-1} d_l S)
    ///                  - (1/(2d)) v_k v_l with v = d * K.
    pub gamma1: DMatrix<f64>,
    /// (Gamma_2)_{kl} = avg_j (d_k b)^T S^{-1} (d_l b).
    pub gamma2: DMatrix<f64>,
}

/// Per-path quasi-likelihood evaluator with per-alpha memoization.
pub struct Evaluator<'a> {
    model: &'a DiffusionModel,
    path: &'a ObservationPath,
    n: usize,
    d: usize,
    /// Increments D_j X, flattened n x d.
    dx: Vec<f64>,
    backend: Backend,
}

enum Backend {
    Scalar(ScalarBackend),
    General(GeneralBackend),
}

/// d = 1 with S = exp(sum_k alpha_k phi_k): everything reduces to weighted
/// scalar sums over precomputed feature rows.
struct ScalarBackend {
    p: usize,
    /// phi_k(X_{t_{j-1}}), n x p row-major.
    feat: Vec<f64>,
    /// avg_j phi_k (length p) and avg_j phi_k phi_l (p x p); alpha-free
    /// ingredients of the information blocks.
    feat_mean: Vec<f64>,
    feat_sq_mean: DMatrix<f64>,
    /// psi_k(X_{t_{j-1}}), n x q row-major, for drift linear in beta.
    psi: Option<Vec<f64>>,
    cache: Option<ScalarCache>,
}

struct ScalarCache {
    alpha: Vec<f64>,
    /// log S_j per observation.
    sum_log_s: f64,
    /// quad = sum_j S_j^{-1} (D_j X)^2 = n d h(alpha).
    quad: f64,
    /// S_j^{-1} per observation.
    w: Vec<f64>,
    /// Linear drift only: c_k = sum_j w_j D_j X psi_{jk} and
    /// G_{kl} = sum_j w_j psi_{jk} psi_{jl}, so that
    /// h2(alpha, beta) = c^T beta - (h/2) beta^T G beta.
    normal_eq: Option<(DVector<f64>, DMatrix<f64>)>,
}

/// Arbitrary dimension and coefficients: per-observation Cholesky factors.
struct GeneralBackend {
    /// Drift features Psi_j (d x q) when the drift is linear in beta.
    psi: Option<Vec<DMatrix<f64>>>,
    cache: Option<GeneralCache>,
}

struct GeneralCache {
    alpha: Vec<f64>,
    sum_log_s: f64,
    quad: f64,
    chol: Vec<Cholesky<f64, Dyn>>,
    /// S_j^{-1} D_j X per observation, flattened n x d.
    sinv_dx: Vec<f64>,
    normal_eq: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a DiffusionModel, path: &'a ObservationPath) -> Result<Self> {
        if path.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                what: "path dimension",
                expected: model.dim(),
                got: path.dim(),
            });
        }
        let n = path.n_increments();
        let d = model.dim();
        let mut dx = Vec::with_capacity(n * d);
        for j in 1..=n {
            dx.extend_from_slice(&path.increment(j));
        }

        let backend = match model.diffusion() {
            DiffusionCoeff::ScalarExpLinear { features } => {
                let p = features.len();
                let mut feat = Vec::with_capacity(n * p);
                for (j, x) in path.lagged_states().enumerate() {
                    for phi in features {
                        let v = phi(x[0]);
                        if !v.is_finite() {
                            return Err(Error::NonFiniteCoefficient { index: j });
                        }
                        feat.push(v);
                    }
                }
                let mut feat_mean = vec![0.0; p];
                let mut feat_sq_mean = DMatrix::zeros(p, p);
                for row in feat.chunks_exact(p.max(1)) {
                    for k in 0..p {
                        feat_mean[k] += row[k];
                        for l in 0..p {
                            feat_sq_mean[(k, l)] += row[k] * row[l];
                        }
                    }
                }
                let inv_n = 1.0 / n as f64;
                feat_mean.iter_mut().for_each(|v| *v *= inv_n);
                feat_sq_mean *= inv_n;

                let psi = match model.drift() {
                    DriftCoeff::LinearInBeta { features } => {
                        let q = features.len();
                        let mut psi = Vec::with_capacity(n * q);
                        let mut buf = [0.0];
                        for (j, x) in path.lagged_states().enumerate() {
                            for f in features {
                                f(x, &mut buf);
                                if !buf[0].is_finite() {
                                    return Err(Error::NonFiniteCoefficient { index: j });
                                }
                                psi.push(buf[0]);
                            }
                        }
                        Some(psi)
                    }
                    DriftCoeff::General { .. } => None,
                };
                Backend::Scalar(ScalarBackend {
                    p,
                    feat,
                    feat_mean,
                    feat_sq_mean,
                    psi,
                    cache: None,
                })
            }
            DiffusionCoeff::Matrix { .. } => {
                let psi = match model.drift() {
                    DriftCoeff::LinearInBeta { features } => {
                        let q = features.len();
                        let mut mats = Vec::with_capacity(n);
                        let mut buf = vec![0.0; d];
                        for (j, x) in path.lagged_states().enumerate() {
                            let mut m = DMatrix::zeros(d, q);
                            for (k, f) in features.iter().enumerate() {
                                f(x, &mut buf);
                                if buf.iter().any(|v| !v.is_finite()) {
                                    return Err(Error::NonFiniteCoefficient { index: j });
                                }
                                for i in 0..d {
                                    m[(i, k)] = buf[i];
                                }
                            }
                            mats.push(m);
                        }
                        Some(mats)
                    }
                    DriftCoeff::General { .. } => None,
                };
                Backend::General(GeneralBackend { psi, cache: None })
            }
        };

        Ok(Evaluator {
            model,
            path,
            n,
            d,
            dx,
            backend,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn model(&self) -> &DiffusionModel {
        self.model
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.model.dim_alpha() {
            return Err(Error::DimensionMismatch {
                what: "alpha",
                expected: self.model.dim_alpha(),
                got: alpha.len(),
            });
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "alpha contains non-finite coordinates",
            });
        }
        Ok(())
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.model.dim_beta() {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: self.model.dim_beta(),
                got: beta.len(),
            });
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "beta contains non-finite coordinates",
            });
        }
        Ok(())
    }

    /// Recomputes every alpha-dependent per-observation quantity unless the
    /// cache already holds this alpha.
    fn refresh(&mut self, alpha: &[f64]) -> Result<()> {
        self.check_alpha(alpha)?;
        match &mut self.backend {
            Backend::Scalar(sb) => {
                if sb.cache.as_ref().is_some_and(|c| c.alpha == alpha) {
                    return Ok(());
                }
                let n = self.n;
                let p = sb.p;
                let mut w = Vec::with_capacity(n);
                let mut sum_log_s = Accum::default();
                let mut quad = Accum::default();
                let q = sb.psi.as_ref().map_or(0, |ps| ps.len() / n);
                let mut c_acc = vec![Accum::default(); q];
                let mut g_acc = vec![Accum::default(); q * q];
                for j in 0..n {
                    let mut u = 0.0;
                    if p > 0 {
                        let row = &sb.feat[j * p..(j + 1) * p];
                        for k in 0..p {
                            u += row[k] * alpha[k];
                        }
                    }
                    let wj = (-u).exp();
                    sum_log_s.add(u);
                    let dxj = self.dx[j];
                    quad.add(wj * dxj * dxj);
                    if let Some(psi) = &sb.psi {
                        let prow = &psi[j * q..(j + 1) * q];
                        let wdx = wj * dxj;
                        for k in 0..q {
                            c_acc[k].add(wdx * prow[k]);
                            for l in 0..q {
                                g_acc[k * q + l].add(wj * prow[k] * prow[l]);
                            }
                        }
                    }
                    w.push(wj);
                }
                let sum_log_s = sum_log_s.value();
                let quad = quad.value();
                if !sum_log_s.is_finite() || !quad.is_finite() {
                    return Err(Error::NonFinite {
                        context: "per-observation sums overflowed",
                    });
                }
                let normal_eq = sb.psi.as_ref().map(|_| {
                    (
                        DVector::from_iterator(q, c_acc.iter().map(Accum::value)),
                        DMatrix::from_fn(q, q, |k, l| g_acc[k * q + l].value()),
                    )
                });
                sb.cache = Some(ScalarCache {
                    alpha: alpha.to_vec(),
                    sum_log_s,
                    quad,
                    w,
                    normal_eq,
                });
                Ok(())
            }
            Backend::General(gb) => {
                if gb.cache.as_ref().is_some_and(|c| c.alpha == alpha) {
                    return Ok(());
                }
                let n = self.n;
                let d = self.d;
                let mut chol = Vec::with_capacity(n);
                let mut sinv_dx = Vec::with_capacity(n * d);
                let mut sum_log_s = Accum::default();
                let mut quad = Accum::default();
                let q = gb.psi.as_ref().map_or(0, |ps| ps[0].ncols());
                let mut c = DVector::zeros(q);
                let mut g = DMatrix::zeros(q, q);
                for (j, x) in self.path.lagged_states().enumerate() {
                    let s = self.model.eval_s(x, alpha).map_err(|e| match e {
                        Error::NonFiniteCoefficient { .. } => {
                            Error::NonFiniteCoefficient { index: j }
                        }
                        other => other,
                    })?;
                    let ch = s.cholesky().ok_or(Error::SingularDiffusion { index: j })?;
                    // log|S| = 2 sum_i log L_ii.
                    let mut logdet = 0.0;
                    for i in 0..d {
                        logdet += ch.l_dirty()[(i, i)].ln();
                    }
                    sum_log_s.add(2.0 * logdet);
                    let dxj = DVector::from_column_slice(&self.dx[j * d..(j + 1) * d]);
                    let sol = ch.solve(&dxj);
                    quad.add(dxj.dot(&sol));
                    sinv_dx.extend(sol.iter().copied());
                    if let Some(psi) = &gb.psi {
                        let pj = &psi[j];
                        let spj = ch.solve(pj);
                        c += pj.transpose() * &sol;
                        g += pj.transpose() * spj;
                    }
                    chol.push(ch);
                }
                let sum_log_s = sum_log_s.value();
                let quad = quad.value();
                if !sum_log_s.is_finite() || !quad.is_finite() {
                    return Err(Error::NonFinite {
                        context: "per-observation sums overflowed",
                    });
                }
                gb.cache = Some(GeneralCache {
                    alpha: alpha.to_vec(),
                    sum_log_s,
                    quad,
                    chol,
                    sinv_dx,
                    normal_eq: gb.psi.as_ref().map(|_| (c, g)),
                });
                Ok(())
            }
        }
    }

    fn cached_scalars(&self) -> (f64, f64) {
        match &self.backend {
            Backend::Scalar(sb) => {
                let c = sb.cache.as_ref().expect("refresh precedes read");
                (c.sum_log_s, c.quad)
            }
            Backend::General(gb) => {
                let c = gb.cache.as_ref().expect("refresh precedes read");
                (c.sum_log_s, c.quad)
            }
        }
    }

    /// sum_j log|S_{j-1}(alpha)|.
    pub fn sum_log_s(&mut self, alpha: &[f64]) -> Result<f64> {
        self.refresh(alpha)?;
        Ok(self.cached_scalars().0)
    }

    /// The explicit profiled stepsize h(alpha).
    pub fn h_of_alpha(&mut self, alpha: &[f64]) -> Result<f64> {
        self.refresh(alpha)?;
        let (_, quad) = self.cached_scalars();
        let h = quad / (self.n as f64 * self.d as f64);
        if h == 0.0 {
            return Err(Error::degenerate("all increments are zero"));
        }
        Ok(h)
    }

    /// Drift sums (sum_j S^{-1}[D_j X, b_{j-1}], sum_j S^{-1}[b_{j-1}^{x2}])
    /// at the given parameter.
    fn drift_sums(&mut self, alpha: &[f64], beta: &[f64]) -> Result<(f64, f64)> {
        self.check_beta(beta)?;
        self.refresh(alpha)?;
        match &self.backend {
            Backend::Scalar(sb) => {
                let cache = sb.cache.as_ref().expect("refreshed");
                if let Some((c, g)) = &cache.normal_eq {
                    let bv = DVector::from_column_slice(beta);
                    return Ok((c.dot(&bv), (g * &bv).dot(&bv)));
                }
                // General drift with scalar diffusion: one weighted pass.
                let DriftCoeff::General { coeff } = self.model.drift() else {
                    unreachable!("scalar backend without normal equations has general drift");
                };
                let mut sib = Accum::default();
                let mut sbb = Accum::default();
                let mut b = [0.0];
                for (j, x) in self.path.lagged_states().enumerate() {
                    coeff(x, alpha, beta, &mut b);
                    if !b[0].is_finite() {
                        return Err(Error::NonFiniteCoefficient { index: j });
                    }
                    let wj = cache.w[j];
                    sib.add(wj * self.dx[j] * b[0]);
                    sbb.add(wj * b[0] * b[0]);
                }
                Ok((sib.value(), sbb.value()))
            }
            Backend::General(gb) => {
                let cache = gb.cache.as_ref().expect("refreshed");
                if let Some((c, g)) = &cache.normal_eq {
                    let bv = DVector::from_column_slice(beta);
                    return Ok((c.dot(&bv), (g * &bv).dot(&bv)));
                }
                let DriftCoeff::General { coeff } = self.model.drift() else {
                    unreachable!("general backend without normal equations has general drift");
                };
                let d = self.d;
                let mut sib = Accum::default();
                let mut sbb = Accum::default();
                let mut b = vec![0.0; d];
                for (j, x) in self.path.lagged_states().enumerate() {
                    coeff(x, alpha, beta, &mut b);
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteCoefficient { index: j });
                    }
                    let bv = DVector::from_column_slice(&b);
                    let sol = cache.chol[j].solve(&bv);
                    let sdx = &cache.sinv_dx[j * d..(j + 1) * d];
                    sib.add(b.iter().zip(sdx).map(|(&bi, &si)| bi * si).sum::<f64>());
                    sbb.add(bv.dot(&sol));
                }
                Ok((sib.value(), sbb.value()))
            }
        }
    }

    /// Full quasi-likelihood at an explicit stepsize h.
    pub fn gqlf(&mut self, alpha: &[f64], beta: &[f64], h: f64) -> Result<f64> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!(
                "stepsize must be positive, got {h}"
            )));
        }
        let (sib, sbb) = self.drift_sums(alpha, beta)?;
        let (sum_log_s, quad) = self.cached_scalars();
        let nd = self.n as f64 * self.d as f64;
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let v = -0.5 * (nd * (log_2pi + h.ln()) + sum_log_s + quad / h - 2.0 * sib + h * sbb);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "quasi-likelihood value",
            });
        }
        Ok(v)
    }

    /// The stationary point of h -> gqlf(theta; h): the positive root of
    /// B h^2 + d h - A = 0 with A = quad/n and B = sum S^{-1}[b^{x2}]/n,
    /// written as 2A / (d + sqrt(d^2 + 4AB)) to stay exact as B -> 0 (the
    /// B = 0 case degenerates to the linear equation with root h(alpha)).
    pub fn h_star(&mut self, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        let (_, sbb) = self.drift_sums(alpha, beta)?;
        let (_, quad) = self.cached_scalars();
        let n = self.n as f64;
        let d = self.d as f64;
        let a = quad / n;
        let b = sbb / n;
        Ok(2.0 * a / (d + (d * d + 4.0 * a * b).sqrt()))
    }

    /// h1(alpha) = -1/2 { sum log|S| + n d log h(alpha) }.
    pub fn h1(&mut self, alpha: &[f64]) -> Result<f64> {
        let h = self.h_of_alpha(alpha)?;
        let (sum_log_s, _) = self.cached_scalars();
        let nd = self.n as f64 * self.d as f64;
        let v = -0.5 * (sum_log_s + nd * h.ln());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "h1 value",
            });
        }
        Ok(v)
    }

    /// h2(alpha, beta) = sum S^{-1}[DX, b] - (h(alpha)/2) sum S^{-1}[b^{x2}].
    pub fn h2(&mut self, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        let h = self.h_of_alpha(alpha)?;
        let (sib, sbb) = self.drift_sums(alpha, beta)?;
        let v = sib - 0.5 * h * sbb;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "h2 value",
            });
        }
        Ok(v)
    }

    /// Modified quasi-likelihood via the expanded closed form.
    pub fn mgqlf(&mut self, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        let nd = self.n as f64 * self.d as f64;
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let h1 = self.h1(alpha)?;
        let h2 = self.h2(alpha, beta)?;
        Ok(-0.5 * nd * (1.0 + log_2pi) + h1 + h2)
    }

    /// Closed-form maximizer of beta -> h2(alpha, beta) for drift linear in
    /// beta, together with the attained h2 value. `None` when the drift is
    /// not linear in beta.
    pub fn profile_beta(&mut self, alpha: &[f64]) -> Result<Option<(Vec<f64>, f64)>> {
        let q = self.model.dim_beta();
        let linear = matches!(self.model.drift(), DriftCoeff::LinearInBeta { .. });
        if !linear {
            return Ok(None);
        }
        if q == 0 {
            return Ok(Some((Vec::new(), 0.0)));
        }
        let h = self.h_of_alpha(alpha)?;
        let (c, g) = self.normal_eq()?;
        // h2 is the quadratic c^T beta - (h/2) beta^T G beta, maximized where
        // h G beta = c; the attained value is c^T beta / 2.
        let hg = g.map(|v| v * h);
        let ch = hg.cholesky().ok_or(Error::SingularNormalEquations)?;
        let beta = ch.solve(&c);
        let h2 = 0.5 * c.dot(&beta);
        Ok(Some((beta.iter().copied().collect(), h2)))
    }

    /// Normal-equation pieces (c, G) for drift linear in beta at the cached
    /// alpha: h2 = c^T beta - (h/2) beta^T G beta.
    fn normal_eq(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let ne = match &self.backend {
            Backend::Scalar(sb) => sb.cache.as_ref().and_then(|c| c.normal_eq.clone()),
            Backend::General(gb) => gb.cache.as_ref().and_then(|c| c.normal_eq.clone()),
        };
        ne.ok_or_else(|| Error::invalid("drift is not linear in beta"))
    }

    /// Analytic beta-block Hessian of the modified quasi-likelihood for drift
    /// linear in beta: d^2_beta m = d^2_beta h2 = -h(alpha) G, constant in
    /// beta. `None` when the drift is not linear.
    pub fn beta_hessian(&mut self, alpha: &[f64]) -> Result<Option<DMatrix<f64>>> {
        if !matches!(self.model.drift(), DriftCoeff::LinearInBeta { .. }) {
            return Ok(None);
        }
        if self.model.dim_beta() == 0 {
            return Ok(Some(DMatrix::zeros(0, 0)));
        }
        let h = self.h_of_alpha(alpha)?;
        let (_, g) = self.normal_eq()?;
        Ok(Some(g.map(|v| -h * v)))
    }

    /// Plug-in information blocks at (alpha, beta).
    pub fn fisher_blocks(&mut self, alpha: &[f64], beta: &[f64]) -> Result<FisherBlocks> {
        self.check_beta(beta)?;
        self.refresh(alpha)?;
        let n = self.n as f64;
        let d = self.d as f64;
        let p = self.model.dim_alpha();
        let q = self.model.dim_beta();

        let (k, gamma1) = match &self.backend {
            Backend::Scalar(sb) => {
                // S^{-1} d_k S = phi_k pointwise, so the traces are feature
                // moments and do not depend on alpha.
                let v = DVector::from_column_slice(&sb.feat_mean);
                let k = &v / d;
                let mut g1 = DMatrix::zeros(p, p);
                for kk in 0..p {
                    for ll in 0..p {
                        g1[(kk, ll)] = 0.5 * sb.feat_sq_mean[(kk, ll)] - v[kk] * v[ll] / (2.0 * d);
                    }
                }
                (k, g1)
            }
            Backend::General(gb) => {
                let cache = gb.cache.as_ref().expect("refreshed");
                // Numeric d_k S by central differences on alpha.
                let eps = f64::EPSILON.cbrt();
                let mut tr = vec![0.0; p];
                let mut tr2 = DMatrix::<f64>::zeros(p, p);
                let mut m = vec![DMatrix::<f64>::zeros(self.d, self.d); p];
                for (j, x) in self.path.lagged_states().enumerate() {
                    let ch = &cache.chol[j];
                    for kk in 0..p {
                        let hstep = eps * alpha[kk].abs().max(1.0);
                        let mut ap = alpha.to_vec();
                        ap[kk] = alpha[kk] + hstep;
                        let sp = self.model.eval_s(x, &ap)?;
                        ap[kk] = alpha[kk] - hstep;
                        let sm = self.model.eval_s(x, &ap)?;
                        let ds = (sp - sm) / (2.0 * hstep);
                        m[kk] = ch.solve(&ds);
                    }
                    for kk in 0..p {
                        tr[kk] += m[kk].trace();
                        for ll in kk..p {
                            let t = (&m[kk] * &m[ll]).trace();
                            tr2[(kk, ll)] += t;
                            if ll != kk {
                                tr2[(ll, kk)] += t;
                            }
                        }
                    }
                }
                let v = DVector::from_iterator(p, tr.iter().map(|t| t / n));
                let k = &v / d;
                let mut g1 = DMatrix::zeros(p, p);
                for kk in 0..p {
                    for ll in 0..p {
                        g1[(kk, ll)] = 0.5 * tr2[(kk, ll)] / n - v[kk] * v[ll] / (2.0 * d);
                    }
                }
                (k, g1)
            }
        };

        let gamma2 = match self.model.drift() {
            DriftCoeff::LinearInBeta { .. } => {
                if q == 0 {
                    DMatrix::zeros(0, 0)
                } else {
                    let (_, g) = self.normal_eq()?;
                    g / n
                }
            }
            DriftCoeff::General { coeff } => {
                // Numeric d_beta b per observation.
                let eps = f64::EPSILON.cbrt();
                let dd = self.d;
                let mut g2 = DMatrix::zeros(q, q);
                let mut bp = vec![0.0; dd];
                let mut bm = vec![0.0; dd];
                let mut db = DMatrix::zeros(dd, q);
                for (j, x) in self.path.lagged_states().enumerate() {
                    for kk in 0..q {
                        let hstep = eps * beta[kk].abs().max(1.0);
                        let mut bv = beta.to_vec();
                        bv[kk] = beta[kk] + hstep;
                        coeff(x, alpha, &bv, &mut bp);
                        bv[kk] = beta[kk] - hstep;
                        coeff(x, alpha, &bv, &mut bm);
                        for i in 0..dd {
                            db[(i, kk)] = (bp[i] - bm[i]) / (2.0 * hstep);
                        }
                    }
                    if db.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteDerivative {
                            target: format!("drift beta-derivative at observation {j}"),
                        });
                    }
                    match &self.backend {
                        Backend::Scalar(sb) => {
                            let wj = sb.cache.as_ref().expect("refreshed").w[j];
                            for kk in 0..q {
                                for ll in 0..q {
                                    g2[(kk, ll)] += wj * db[(0, kk)] * db[(0, ll)];
                                }
                            }
                        }
                        Backend::General(gb) => {
                            let ch = &gb.cache.as_ref().expect("refreshed").chol[j];
                            let sdb = ch.solve(&db);
                            g2 += db.transpose() * sdb;
                        }
                    }
                }
                g2 / n
            }
        };

        Ok(FisherBlocks { k, gamma1, gamma2 })
    }

    /// Analytic gradient of h1 for the exponential-linear diffusion:
    /// d_k h1 = -1/2 sum_j phi_kj + (1/(2h)) sum_j phi_kj w_j (D_j X)^2.
    /// `None` for matrix coefficients.
    pub fn h1_gradient_analytic(&mut self, alpha: &[f64]) -> Result<Option<Vec<f64>>> {
        let h = self.h_of_alpha(alpha)?;
        let Backend::Scalar(sb) = &self.backend else {
            return Ok(None);
        };
        let cache = sb.cache.as_ref().expect("refreshed");
        let p = sb.p;
        let mut g = vec![0.0; p];
        for (k, gk) in g.iter_mut().enumerate() {
            let sum_phi = csum((0..self.n).map(|j| sb.feat[j * p + k]));
            let sum_phi_w = csum(
                (0..self.n).map(|j| sb.feat[j * p + k] * cache.w[j] * self.dx[j] * self.dx[j]),
            );
            *gk = -0.5 * sum_phi + sum_phi_w / (2.0 * h);
        }
        Ok(Some(g))
    }

    /// Analytic gradient of h2 in (alpha, beta) for the exponential-linear
    /// diffusion with drift linear in beta. `None` otherwise.
    ///
    /// With weights w_j = S_j^{-1}, b_j = psi_j^T beta:
    ///   d_k h2 = -sum_j phi_kj w_j D_j X b_j
    ///            - (d_k h / 2) sum_j w_j b_j^2
    ///            + (h/2) sum_j phi_kj w_j b_j^2,
    ///   d_k h  = -(1/(n d)) sum_j phi_kj w_j (D_j X)^2,
    ///   d_beta h2 = c - h G beta.
    pub fn h2_gradient_analytic(
        &mut self,
        alpha: &[f64],
        beta: &[f64],
    ) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        self.check_beta(beta)?;
        let h = self.h_of_alpha(alpha)?;
        let linear = matches!(self.model.drift(), DriftCoeff::LinearInBeta { .. });
        let Backend::Scalar(sb) = &self.backend else {
            return Ok(None);
        };
        if !linear {
            return Ok(None);
        }
        let cache = sb.cache.as_ref().expect("refreshed");
        let (c, g) = cache.normal_eq.as_ref().expect("linear drift");
        let p = sb.p;
        let q = self.model.dim_beta();
        let nd = self.n as f64 * self.d as f64;
        let bv = DVector::from_column_slice(beta);
        let sbb = (g * &bv).dot(&bv);

        let psi = sb.psi.as_ref().expect("linear drift");
        let mut ga = vec![0.0; p];
        for (k, gak) in ga.iter_mut().enumerate() {
            let mut s_dxb = Accum::default();
            let mut s_bb = Accum::default();
            let mut s_dh = Accum::default();
            for j in 0..self.n {
                let phi = sb.feat[j * p + k];
                let wj = cache.w[j];
                let mut bj = 0.0;
                for l in 0..q {
                    bj += psi[j * q + l] * beta[l];
                }
                s_dxb.add(phi * wj * self.dx[j] * bj);
                s_bb.add(phi * wj * bj * bj);
                s_dh.add(phi * wj * self.dx[j] * self.dx[j]);
            }
            let dh = -s_dh.value() / nd;
            *gak = -s_dxb.value() - 0.5 * dh * sbb + 0.5 * h * s_bb.value();
        }
        let gb = c - &(g * &bv) * h;
        Ok(Some((ga, gb.iter().copied().collect())))
    }
}

fn check_theta(model: &DiffusionModel, theta: &Theta) -> Result<()> {
    model.check_theta(theta)
}

/// One-shot wrappers over [`Evaluator`] for single evaluations.
pub fn gqlf(path: &ObservationPath, model: &DiffusionModel, theta: &Theta, h: f64) -> Result<f64> {
    check_theta(model, theta)?;
    Evaluator::new(model, path)?.gqlf(&theta.alpha, &theta.beta, h)
}

pub fn h_of_alpha(path: &ObservationPath, model: &DiffusionModel, alpha: &[f64]) -> Result<f64> {
    Evaluator::new(model, path)?.h_of_alpha(alpha)
}

pub fn h_star(path: &ObservationPath, model: &DiffusionModel, theta: &Theta) -> Result<f64> {
    check_theta(model, theta)?;
    Evaluator::new(model, path)?.h_star(&theta.alpha, &theta.beta)
}

pub fn mgqlf(path: &ObservationPath, model: &DiffusionModel, theta: &Theta) -> Result<f64> {
    check_theta(model, theta)?;
    Evaluator::new(model, path)?.mgqlf(&theta.alpha, &theta.beta)
}

pub fn h1(path: &ObservationPath, model: &DiffusionModel, alpha: &[f64]) -> Result<f64> {
    Evaluator::new(model, path)?.h1(alpha)
}

pub fn h2(
    path: &ObservationPath,
    model: &DiffusionModel,
    alpha: &[f64],
    beta: &[f64],
) -> Result<f64> {
    Evaluator::new(model, path)?.h2(alpha, beta)
}

/// Gradient (analytic when the model structure supports it, numeric central
/// differences otherwise) and optional numeric Hessian of one criterion.
/// Differentiation variables: alpha for `H1`, the stacked vector
/// (alpha, beta) for `H2` and `Mgqlf`. The stencil stays inside the model's
/// parameter box.
pub fn grad_hessian(
    path: &ObservationPath,
    model: &DiffusionModel,
    theta: &Theta,
    target: Target,
    with_hessian: bool,
) -> Result<Derivs> {
    check_theta(model, theta)?;
    let mut ev = Evaluator::new(model, path)?;
    let p = model.dim_alpha();
    let space = model.space();

    let gradient = match target {
        Target::H1 => match ev.h1_gradient_analytic(&theta.alpha)? {
            Some(g) => g,
            None => numdiff::gradient(|a| ev.h1(a), &theta.alpha, Some(space.alpha_bounds()))?,
        },
        Target::H2 | Target::Mgqlf => {
            let analytic = match target {
                Target::H2 => ev.h2_gradient_analytic(&theta.alpha, &theta.beta)?,
                _ => match (
                    ev.h1_gradient_analytic(&theta.alpha)?,
                    ev.h2_gradient_analytic(&theta.alpha, &theta.beta)?,
                ) {
                    (Some(g1), Some((g2a, g2b))) => {
                        Some((g1.iter().zip(&g2a).map(|(a, b)| a + b).collect(), g2b))
                    }
                    _ => None,
                },
            };
            match analytic {
                Some((ga, gb)) => ga.into_iter().chain(gb).collect(),
                None => {
                    let x: Vec<f64> = theta.alpha.iter().chain(&theta.beta).copied().collect();
                    let bounds: Vec<(f64, f64)> = space
                        .alpha_bounds()
                        .iter()
                        .chain(space.beta_bounds())
                        .copied()
                        .collect();
                    numdiff::gradient(
                        |v| match target {
                            Target::H2 => ev.h2(&v[..p], &v[p..]),
                            _ => ev.mgqlf(&v[..p], &v[p..]),
                        },
                        &x,
                        Some(&bounds),
                    )?
                }
            }
        }
    };

    let hessian = if with_hessian {
        Some(match target {
            Target::H1 => numdiff::hessian(|a| ev.h1(a), &theta.alpha, Some(space.alpha_bounds()))?,
            Target::H2 | Target::Mgqlf => {
                let x: Vec<f64> = theta.alpha.iter().chain(&theta.beta).copied().collect();
                let bounds: Vec<(f64, f64)> = space
                    .alpha_bounds()
                    .iter()
                    .chain(space.beta_bounds())
                    .copied()
                    .collect();
                numdiff::hessian(
                    |v| match target {
                        Target::H2 => ev.h2(&v[..p], &v[p..]),
                        _ => ev.mgqlf(&v[..p], &v[p..]),
                    },
                    &x,
                    Some(&bounds),
                )?
            }
        })
    } else {
        None
    };

    Ok(Derivs { gradient, hessian })
}
