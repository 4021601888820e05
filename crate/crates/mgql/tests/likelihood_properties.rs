//! Identities and independent oracles for the quasi-likelihood layer.

use std::sync::Arc;

use mgql::likelihood::{self, grad_hessian, Target};
use mgql::model::{BuiltinCatalog, DiffusionModel, DriftCoeff, ParamSpace, Theta};
use mgql::simulate::{simulate_path, ObservationPath, SimulationPlan, StepRule};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sim(model: &DiffusionModel, theta: &Theta, n: usize, seed: u64) -> ObservationPath {
    let plan = SimulationPlan::new(n, StepRule::Power(2.0 / 3.0), 1.0, vec![1.0])
        .unwrap()
        .with_refine(5)
        .unwrap();
    simulate_path(model, theta, &plan, seed).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Straight re-implementation of the Gaussian quasi-likelihood, summed
/// naively term by term with explicit matrix algebra.
fn gqlf_naive(path: &ObservationPath, model: &DiffusionModel, theta: &Theta, h: f64) -> f64 {
    let d = model.dim();
    let n = path.n_increments();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut total = 0.0;
    for j in 0..n {
        let x = path.state(j);
        let s = model.eval_s(x, &theta.alpha).unwrap();
        let b = model.eval_b(x, &theta.alpha, &theta.beta).unwrap();
        let dx = path.increment(j + 1);
        let resid = nalgebra::DVector::from_iterator(d, (0..d).map(|i| dx[i] - h * b[i]));
        let hs = s.map(|v| h * v);
        let det = hs.determinant();
        let quad = (hs.try_inverse().unwrap() * &resid).dot(&resid);
        total += -0.5 * ((two_pi.powi(d as i32) * det).ln() + quad);
    }
    total
}

#[test]
fn gqlf_matches_a_naive_reimplementation() {
    let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
    let theta = Theta::new(vec![0.3, 1.2, -0.4], vec![-0.8, 0.2]);
    let path = sim(&model, &theta, 300, 5);
    for h in [0.01, 0.05, 0.2] {
        let fast = likelihood::gqlf(&path, &model, &theta, h).unwrap();
        let slow = gqlf_naive(&path, &model, &theta, h);
        assert!(rel(fast, slow) < 1e-9, "h = {h}: {fast} vs naive {slow}");
    }
}

#[test]
fn hand_computed_single_increment_value() {
    // One increment dx = 1, S = 1, no drift: the quasi-likelihood at h = 1 is
    // -(log 2pi + 1)/2, and h(alpha) = dx^2 = 1 makes the modified criterion
    // take the same value.
    let model = DiffusionModel::scalar_exp_linear(
        "unit",
        vec![Arc::new(|_: f64| 1.0) as _],
        DriftCoeff::LinearInBeta { features: vec![] },
        ParamSpace::alpha_only(vec![(-1.0, 1.0)]).unwrap(),
    )
    .unwrap();
    let path = ObservationPath::from_values(1, vec![0.0, 1.0]).unwrap();
    let theta = Theta::new(vec![0.0], vec![]);
    let expect = -0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let h = likelihood::h_of_alpha(&path, &model, &theta.alpha).unwrap();
    assert!((h - 1.0).abs() < 1e-15);
    let g = likelihood::gqlf(&path, &model, &theta, 1.0).unwrap();
    assert!((g - expect).abs() < 1e-12, "gqlf {g} vs {expect}");
    let m = likelihood::mgqlf(&path, &model, &theta).unwrap();
    assert!((m - expect).abs() < 1e-12, "mgqlf {m} vs {expect}");
}

#[test]
fn scalar_and_general_backends_agree() {
    // The same model written as an exponential-linear diffusion and as an
    // opaque matrix coefficient must produce identical criteria.
    let scalar = BuiltinCatalog::model("diff3", "drif1").unwrap();
    let general = DiffusionModel::general(
        "diff3-as-matrix",
        1,
        Arc::new(|x: &[f64], alpha: &[f64], out: &mut DMatrix<f64>| {
            let z = alpha[0] * x[0].cos() + alpha[1] * x[0].cos() * x[0].sin();
            out[(0, 0)] = (0.5 * z).exp();
        }),
        DriftCoeff::linear_scalar(vec![Arc::new(|x: f64| x) as _, Arc::new(|_: f64| 1.0) as _]),
        ParamSpace::new(vec![(-10.0, 10.0); 2], vec![(-10.0, 10.0); 2]).unwrap(),
    )
    .unwrap();
    let theta = Theta::new(vec![0.7, -0.3], vec![-1.1, 0.4]);
    let path = sim(&scalar, &theta, 250, 9);

    let hs = likelihood::h_of_alpha(&path, &scalar, &theta.alpha).unwrap();
    let hg = likelihood::h_of_alpha(&path, &general, &theta.alpha).unwrap();
    assert!(rel(hs, hg) < 1e-12, "h: {hs} vs {hg}");
    for h in [0.02, 0.1] {
        let a = likelihood::gqlf(&path, &scalar, &theta, h).unwrap();
        let b = likelihood::gqlf(&path, &general, &theta, h).unwrap();
        assert!(rel(a, b) < 1e-12, "gqlf at {h}: {a} vs {b}");
    }
    let a = likelihood::mgqlf(&path, &scalar, &theta).unwrap();
    let b = likelihood::mgqlf(&path, &general, &theta).unwrap();
    assert!(rel(a, b) < 1e-12, "mgqlf: {a} vs {b}");
    let a = likelihood::h_star(&path, &scalar, &theta).unwrap();
    let b = likelihood::h_star(&path, &general, &theta).unwrap();
    assert!(rel(a, b) < 1e-12, "h_star: {a} vs {b}");
}

#[test]
fn h1_is_invariant_under_constant_rescaling_of_s() {
    // Appending an intercept feature with weight log(kappa) multiplies S by
    // kappa and divides h(alpha) by kappa; h1 must not move.
    let base = DiffusionModel::scalar_exp_linear(
        "cos",
        vec![Arc::new(|x: f64| x.cos()) as _],
        DriftCoeff::LinearInBeta { features: vec![] },
        ParamSpace::alpha_only(vec![(-5.0, 5.0)]).unwrap(),
    )
    .unwrap();
    let lifted = DiffusionModel::scalar_exp_linear(
        "cos-with-intercept",
        vec![Arc::new(|x: f64| x.cos()) as _, Arc::new(|_: f64| 1.0) as _],
        DriftCoeff::LinearInBeta { features: vec![] },
        ParamSpace::alpha_only(vec![(-5.0, 5.0), (-5.0, 5.0)]).unwrap(),
    )
    .unwrap();
    let theta = Theta::new(vec![0.8], vec![]);
    let path = sim(&base, &theta, 400, 3);
    let h1_base = likelihood::h1(&path, &base, &[0.8]).unwrap();
    let h_base = likelihood::h_of_alpha(&path, &base, &[0.8]).unwrap();
    for kappa in [0.1f64, 1.0, 7.5] {
        let alpha = vec![0.8, kappa.ln()];
        let h1_k = likelihood::h1(&path, &lifted, &alpha).unwrap();
        let h_k = likelihood::h_of_alpha(&path, &lifted, &alpha).unwrap();
        assert!(
            rel(h1_base, h1_k) < 1e-12,
            "kappa = {kappa}: h1 {h1_base} vs {h1_k}"
        );
        assert!(
            rel(h_base / kappa, h_k) < 1e-12,
            "kappa = {kappa}: h/kappa {} vs {h_k}",
            h_base / kappa
        );
    }
}

#[test]
fn h_star_is_a_stationary_maximum_of_the_stepsize_profile() {
    let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
    let theta = Theta::new(vec![0.3, 1.2, -0.4], vec![-0.8, 0.2]);
    let path = sim(&model, &theta, 400, 13);
    let hs = likelihood::h_star(&path, &model, &theta).unwrap();
    let g = |h: f64| likelihood::gqlf(&path, &model, &theta, h).unwrap();
    let eps = 1e-6 * hs;
    let deriv = (g(hs + eps) - g(hs - eps)) / (2.0 * eps);
    // Normalize by the curvature scale of the profile.
    let scale = (g(hs) - g(0.9 * hs)).abs().max(1.0) / (0.1 * hs);
    assert!(
        (deriv / scale).abs() < 1e-5,
        "profile derivative {deriv} at h* = {hs} (scale {scale})"
    );
    for delta in [1e-3, 1e-2] {
        assert!(g(hs) >= g(hs * (1.0 + delta)) - 1e-9);
        assert!(g(hs) >= g(hs * (1.0 - delta)) - 1e-9);
    }
}

#[test]
fn h_star_collapses_to_h_alpha_without_drift() {
    let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
    let theta = Theta::new(vec![0.3, 1.2, -0.4], vec![0.0, 0.0]);
    let path = sim(&model, &theta, 300, 17);
    let hs = likelihood::h_star(&path, &model, &theta).unwrap();
    let ha = likelihood::h_of_alpha(&path, &model, &theta.alpha).unwrap();
    assert_eq!(
        hs.to_bits(),
        ha.to_bits(),
        "b = 0 must give h* = h(alpha) exactly"
    );
}

#[test]
fn h2_is_an_exact_parabola_along_beta_rays() {
    // For drift linear in beta, h2(alpha, t e) is a parabola in t; three
    // points determine it and its vertex must match the profiled solution's
    // projection onto the ray.
    let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
    let theta = Theta::new(vec![0.5], vec![-1.0, 0.5]);
    let path = sim(&model, &theta, 300, 21);
    let alpha = vec![0.5];
    let dir = [1.0, -0.7];
    let f = |t: f64| likelihood::h2(&path, &model, &alpha, &[t * dir[0], t * dir[1]]).unwrap();
    let (f0, f1, f2) = (f(0.0), f(1.0), f(2.0));
    // Quadratic through t = 0, 1, 2: value at arbitrary t.
    let a = 0.5 * (f2 - 2.0 * f1 + f0);
    let b = f1 - f0 - a;
    let c = f0;
    for t in [-1.5, 0.25, 3.0] {
        let predicted = a * t * t + b * t + c;
        let actual = f(t);
        assert!(
            rel(predicted, actual) < 1e-10,
            "t = {t}: parabola {predicted} vs h2 {actual}"
        );
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let model = BuiltinCatalog::model("diff1", "drif1").unwrap();
    let theta = Theta::new(vec![0.3, 1.2, -0.4], vec![-0.8, 0.2]);
    let path = sim(&model, &theta, 300, 25);
    for target in [Target::H1, Target::H2, Target::Mgqlf] {
        let derivs = grad_hessian(&path, &model, &theta, target, false).unwrap();
        let grad = derivs.gradient;
        // Independent central differences, coordinate by coordinate. H1 is a
        // function of alpha alone; the other two differentiate the stacked
        // (alpha, beta) vector.
        let dims = match target {
            Target::H1 => theta.alpha.len(),
            _ => theta.alpha.len() + theta.beta.len(),
        };
        assert_eq!(grad.len(), dims);
        for (k, &gk) in grad.iter().enumerate() {
            let eval = |t: &Theta| -> f64 {
                match target {
                    Target::H1 => likelihood::h1(&path, &model, &t.alpha).unwrap(),
                    Target::H2 => likelihood::h2(&path, &model, &t.alpha, &t.beta).unwrap(),
                    Target::Mgqlf => likelihood::mgqlf(&path, &model, t).unwrap(),
                }
            };
            let mut up = theta.clone();
            let mut dn = theta.clone();
            let step = 1e-5;
            if k < theta.alpha.len() {
                up.alpha[k] += step;
                dn.alpha[k] -= step;
            } else {
                up.beta[k - theta.alpha.len()] += step;
                dn.beta[k - theta.alpha.len()] -= step;
            }
            let fd = (eval(&up) - eval(&dn)) / (2.0 * step);
            assert!(
                rel(gk, fd) < 1e-4,
                "{target:?} coordinate {k}: analytic {gk} vs fd {fd}"
            );
        }
    }
}

#[test]
fn residual_round_trip_recovers_injected_noise() {
    // Build increments x_{j+1} = x_j + h b + sqrt(h) a eps_j by hand; the
    // residual transform must return exactly the injected eps.
    let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
    let theta = Theta::new(vec![0.5], vec![-1.0, 0.5]);
    let h = 0.013;
    let eps = [0.3, -1.1, 0.0, 2.4, -0.6];
    let mut values = vec![1.0];
    for e in eps {
        let x = *values.last().unwrap();
        let a = model.eval_a(&[x], &theta.alpha).unwrap()[(0, 0)];
        let b = model.eval_b(&[x], &theta.alpha, &theta.beta).unwrap()[0];
        values.push(x + h * b + h.sqrt() * a * e);
    }
    let path = ObservationPath::from_values(1, values).unwrap();
    let fit = mgql::FitResult {
        schema_version: 1,
        model_label: model.label().to_string(),
        mode: mgql::FitMode::Joint,
        n: eps.len(),
        dim: 1,
        alpha_names: model.alpha_names().to_vec(),
        beta_names: model.beta_names().to_vec(),
        theta: theta.clone(),
        h_tilde: h,
        loglik: 0.0,
        h1: 0.0,
        h2: 0.0,
        converged: true,
        at_boundary: false,
        fn_evals: 0,
        trace: vec![],
        warnings: vec![],
        cov: None,
    };
    let rec = mgql::residuals(&path, &model, &fit).unwrap();
    assert_eq!(rec.len(), eps.len());
    for (r, e) in rec.iter().zip(eps) {
        assert!((r - e).abs() < 1e-12, "recovered {r} vs injected {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The modified criterion is the plain criterion evaluated at the plug-in
    /// stepsize, and it splits into the advertised three parts.
    #[test]
    fn mgqlf_identities_hold_on_random_instances(
        a1 in -1.5f64..1.5,
        a2 in -1.5f64..1.5,
        b1 in -2.0f64..0.5,
        b2 in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let model = BuiltinCatalog::model("diff2", "drif1").unwrap();
        let truth = Theta::new(vec![0.5, -0.5], vec![-1.0, 0.0]);
        let path = sim(&model, &truth, 150, seed);
        let theta = Theta::new(vec![a1, a2], vec![b1, b2]);

        let h = likelihood::h_of_alpha(&path, &model, &theta.alpha).unwrap();
        let m = likelihood::mgqlf(&path, &model, &theta).unwrap();
        let g = likelihood::gqlf(&path, &model, &theta, h).unwrap();
        prop_assert!(rel(m, g) < 1e-10, "mgqlf {m} vs gqlf(h(alpha)) {g}");

        let n = path.n_increments() as f64;
        let konst = -0.5 * n * (1.0 + (2.0 * std::f64::consts::PI).ln());
        let h1 = likelihood::h1(&path, &model, &theta.alpha).unwrap();
        let h2 = likelihood::h2(&path, &model, &theta.alpha, &theta.beta).unwrap();
        prop_assert!(rel(m, konst + h1 + h2) < 1e-10);
    }

    /// The closed-form profiled drift is the exact maximizer of h2.
    #[test]
    fn profiled_beta_dominates_random_competitors(
        c1 in -3.0f64..3.0,
        c2 in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let model = BuiltinCatalog::model("diff5", "drif1").unwrap();
        let truth = Theta::new(vec![0.5], vec![-1.0, 0.5]);
        let path = sim(&model, &truth, 150, seed);
        let alpha = [0.4];
        let mut ev = mgql::likelihood::Evaluator::new(&model, &path).unwrap();
        let (beta, h2_star) = ev.profile_beta(&alpha).unwrap().unwrap();
        let h2_at = likelihood::h2(&path, &model, &alpha, &beta).unwrap();
        prop_assert!(rel(h2_star, h2_at) < 1e-10);
        let other = likelihood::h2(&path, &model, &alpha, &[c1, c2]).unwrap();
        prop_assert!(other <= h2_star + 1e-9 * (1.0 + h2_star.abs()));
    }
}
