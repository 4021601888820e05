//! Box-constrained minimization engines used by the fitting layer.
//!
//! Candidate points are projected onto the box before evaluation, so the
//! objective is never called outside its search domain. The caller maximizes
//! by handing in the negated criterion and maps evaluation failures to
//! `f64::INFINITY`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Search method. Nelder-Mead is the default everywhere; projected gradient
/// is available as a cross-check for smooth objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NelderMead,
    ProjectedGradient,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    pub max_iters: usize,
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_iters: 2000,
            f_tol: 1e-10,
            x_tol: 1e-8,
        }
    }
}

/// Result of one local search (or of a multistart sweep).
#[derive(Clone, Debug)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
    pub fn_evals: usize,
    pub converged: bool,
    /// Any coordinate ended within absolute slack 1e-9 * width of a bound.
    pub at_boundary: bool,
    /// Index of the winning start in a multistart sweep (0 otherwise).
    pub start_index: usize,
}

fn clamp(bounds: &[(f64, f64)], x: &mut [f64]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn near_boundary(bounds: &[(f64, f64)], x: &[f64]) -> bool {
    x.iter().zip(bounds).any(|(&v, &(lo, hi))| {
        let slack = 1e-9 * (hi - lo);
        v - lo <= slack || hi - v <= slack
    })
}

/// Nelder-Mead with simplex vertices projected onto the box
/// (Lagarias coefficients: reflect 1, expand 2, contract 1/2, shrink 1/2).
pub fn nelder_mead<F>(mut f: F, bounds: &[(f64, f64)], x0: &[f64], opts: &SearchOptions) -> Outcome
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    if dim == 0 {
        let fv = eval(&[], &mut evals);
        return Outcome {
            x: Vec::new(),
            f: fv,
            iters: 0,
            fn_evals: evals,
            converged: true,
            at_boundary: false,
            start_index: 0,
        };
    }

    let mut start = x0.to_vec();
    clamp(bounds, &mut start);

    // Initial simplex: perturb each coordinate by 5% of the box width,
    // flipping direction when that would leave the box.
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(start.clone());
    for i in 0..dim {
        let (lo, hi) = bounds[i];
        let step = 0.05 * (hi - lo);
        let mut v = start.clone();
        v[i] = if start[i] + step <= hi {
            start[i] + step
        } else {
            start[i] - step
        };
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        iters += 1;
        // Order so that fv[order[0]] is best.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        let spread = fv[worst] - fv[best];
        let diameter = simplex
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[best])
                    .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if spread <= opts.f_tol * (1.0 + fv[best].abs()) && diameter <= opts.x_tol {
            converged = true;
            break;
        }

        // Centroid of all vertices but the worst.
        let mut centroid = vec![0.0; dim];
        for (idx, v) in simplex.iter().enumerate() {
            if idx == worst {
                continue;
            }
            for (c, &vi) in centroid.iter_mut().zip(v) {
                *c += vi;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let project_from = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(&c, &w)| c + coef * (c - w))
                .collect();
            clamp(bounds, &mut p);
            p
        };

        let reflected = project_from(1.0);
        let fr = eval(&reflected, &mut evals);
        if fr < fv[best] {
            let expanded = project_from(2.0);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[worst] = expanded;
                fv[worst] = fe;
            } else {
                simplex[worst] = reflected;
                fv[worst] = fr;
            }
        } else if fr < fv[second_worst] {
            simplex[worst] = reflected;
            fv[worst] = fr;
        } else {
            let contracted = if fr < fv[worst] {
                project_from(0.5)
            } else {
                project_from(-0.5)
            };
            let fc = eval(&contracted, &mut evals);
            if fc < fv[worst].min(fr) {
                simplex[worst] = contracted;
                fv[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let best_point = simplex[best].clone();
                for (idx, v) in simplex.iter_mut().enumerate() {
                    if idx == best {
                        continue;
                    }
                    for (vi, &bi) in v.iter_mut().zip(&best_point) {
                        *vi = bi + 0.5 * (*vi - bi);
                    }
                    fv[idx] = eval(v, &mut evals);
                }
            }
        }
    }

    let best = (0..=dim)
        .min_by(|&a, &b| fv[a].total_cmp(&fv[b]))
        .expect("non-empty simplex");
    let x = simplex.swap_remove(best);
    Outcome {
        f: fv[best],
        at_boundary: near_boundary(bounds, &x),
        x,
        iters,
        fn_evals: evals,
        converged,
        start_index: 0,
    }
}

/// Projected gradient descent with backtracking line search; the gradient is
/// taken by central differences with in-box stencils.
pub fn projected_gradient<F>(
    mut f: F,
    bounds: &[(f64, f64)],
    x0: &[f64],
    opts: &SearchOptions,
) -> Outcome
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    if dim == 0 {
        let fv = eval(&[], &mut evals);
        return Outcome {
            x: Vec::new(),
            f: fv,
            iters: 0,
            fn_evals: evals,
            converged: true,
            at_boundary: false,
            start_index: 0,
        };
    }

    let mut x = x0.to_vec();
    clamp(bounds, &mut x);
    let mut fx = eval(&x, &mut evals);
    let eps = f64::EPSILON.cbrt();
    let mut iters = 0;
    let mut converged = false;

    while iters < opts.max_iters {
        iters += 1;
        let mut grad = vec![0.0; dim];
        let mut xp = x.clone();
        for i in 0..dim {
            let (lo, hi) = bounds[i];
            let room = (hi - x[i]).min(x[i] - lo).max(0.0);
            let h = (eps * x[i].abs().max(1.0)).min(0.5 * room).max(1e-300);
            xp[i] = x[i] + h;
            let fp = eval(&xp, &mut evals);
            xp[i] = x[i] - h;
            let fm = eval(&xp, &mut evals);
            xp[i] = x[i];
            grad[i] = (fp - fm) / (2.0 * h);
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            converged = gnorm == 0.0;
            break;
        }

        // Backtracking on the projected step.
        let mut t = 1.0 / gnorm.max(1.0);
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(&xi, &g)| xi - t * g).collect();
            clamp(bounds, &mut cand);
            let fc = eval(&cand, &mut evals);
            let step: f64 = cand
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
                .fold(0.0, f64::max);
            if fc < fx - 1e-4 * t * gnorm * gnorm {
                let df = fx - fc;
                x = cand;
                fx = fc;
                accepted = true;
                if df <= opts.f_tol * (1.0 + fx.abs()) && step <= opts.x_tol {
                    converged = true;
                }
                break;
            }
            if step <= opts.x_tol {
                // Even a vanishing projected step cannot improve: stationary.
                converged = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted;
            break;
        }
    }

    Outcome {
        f: fx,
        at_boundary: near_boundary(bounds, &x),
        x,
        iters,
        fn_evals: evals,
        converged,
        start_index: 0,
    }
}

/// Runs the chosen method from every start and keeps the best minimum,
/// together with every start's attained value. Ties within `f_tol` resolve
/// to the earliest start, which keeps sweeps deterministic.
pub fn multistart<F>(
    mut f: F,
    bounds: &[(f64, f64)],
    starts: &[Vec<f64>],
    method: Method,
    opts: &SearchOptions,
) -> (Outcome, Vec<f64>)
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(!starts.is_empty(), "multistart needs at least one start");
    let mut best: Option<Outcome> = None;
    let mut total_evals = 0usize;
    let mut trace = Vec::with_capacity(starts.len());
    for (idx, start) in starts.iter().enumerate() {
        let mut out = match method {
            Method::NelderMead => nelder_mead(&mut f, bounds, start, opts),
            Method::ProjectedGradient => projected_gradient(&mut f, bounds, start, opts),
        };
        total_evals += out.fn_evals;
        out.start_index = idx;
        trace.push(out.f);
        best = match best {
            None => Some(out),
            Some(cur) => {
                if out.f < cur.f - opts.f_tol * (1.0 + cur.f.abs()) {
                    Some(out)
                } else {
                    Some(cur)
                }
            }
        };
    }
    let mut best = best.expect("at least one start");
    best.fn_evals = total_evals;
    (best, trace)
}

/// Uniform start points over per-coordinate ranges.
pub fn sample_starts(ranges: &[(f64, f64)], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            ranges
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bowl(x: &[f64]) -> f64 {
        (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.7).powi(2)
    }

    #[test]
    fn nelder_mead_finds_interior_minimum() {
        let out = nelder_mead(
            bowl,
            &[(-2.0, 2.0), (-2.0, 2.0)],
            &[1.5, 1.5],
            &SearchOptions::default(),
        );
        assert!(out.converged);
        assert!(!out.at_boundary);
        assert!((out.x[0] - 0.3).abs() < 1e-6, "{:?}", out.x);
        assert!((out.x[1] + 0.7).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn minimum_outside_box_is_clamped_and_flagged() {
        // Unconstrained minimum at x = 3, box ends at 1.
        let out = nelder_mead(
            |x| (x[0] - 3.0).powi(2),
            &[(-1.0, 1.0)],
            &[0.0],
            &SearchOptions::default(),
        );
        assert!((out.x[0] - 1.0).abs() < 1e-7, "{:?}", out.x);
        assert!(out.at_boundary);
    }

    #[test]
    fn multistart_escapes_local_minimum() {
        // Double well: local minimum near x = 1 (f = 0.05), global near
        // x = -1 (f = -0.05).
        let well = |x: &[f64]| {
            let t = x[0];
            (t * t - 1.0).powi(2) + 0.05 * t
        };
        let opts = SearchOptions::default();
        let bad = nelder_mead(well, &[(-2.0, 2.0)], &[1.5], &opts);
        assert!(bad.x[0] > 0.5, "single start stays in the nearer well");
        let starts = vec![vec![1.5], vec![-1.5]];
        let (out, trace) = multistart(well, &[(-2.0, 2.0)], &starts, Method::NelderMead, &opts);
        assert!(out.x[0] < -0.5, "multistart should reach the global well");
        assert_eq!(out.start_index, 1);
        assert_eq!(trace.len(), 2);
        assert!(trace[1] < trace[0]);
    }

    #[test]
    fn projected_gradient_matches_nelder_mead_on_smooth_bowl() {
        let opts = SearchOptions {
            max_iters: 5000,
            ..SearchOptions::default()
        };
        let a = nelder_mead(bowl, &[(-2.0, 2.0), (-2.0, 2.0)], &[1.0, -1.5], &opts);
        let b = projected_gradient(bowl, &[(-2.0, 2.0), (-2.0, 2.0)], &[1.0, -1.5], &opts);
        assert!((a.x[0] - b.x[0]).abs() < 1e-4, "{:?} vs {:?}", a.x, b.x);
        assert!((a.x[1] - b.x[1]).abs() < 1e-4);
    }

    #[test]
    fn zero_dimensional_search_is_trivial() {
        let out = nelder_mead(|_| 7.0, &[], &[], &SearchOptions::default());
        assert!(out.converged);
        assert_eq!(out.f, 7.0);
        assert!(out.x.is_empty());
    }

    #[test]
    fn sampled_starts_are_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1 = sample_starts(&[(-1.0, 1.0), (0.0, 4.0)], 5, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s2 = sample_starts(&[(-1.0, 1.0), (0.0, 4.0)], 5, &mut rng);
        assert_eq!(s1, s2);
        for s in &s1 {
            assert!((-1.0..=1.0).contains(&s[0]));
            assert!((0.0..=4.0).contains(&s[1]));
        }
    }
}
