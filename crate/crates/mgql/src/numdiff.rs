//! Central finite differences for gradients and Hessians.
//!
//! Step sizes follow the usual truncation/roundoff balance: eps^(1/3) scaled
//! steps for first derivatives, eps^(1/4) for second derivatives, both
//! relative to max(1, |x_i|). When box bounds are supplied the stencil is
//! shrunk so every evaluation point stays inside the box.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn steps(x: &[f64], bounds: Option<&[(f64, f64)]>, eps: f64, target: &str) -> Result<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let mut h = eps * xi.abs().max(1.0);
            if let Some(bs) = bounds {
                let (lo, hi) = bs[i];
                let room = (hi - xi).min(xi - lo);
                if room <= 0.0 {
                    return Err(Error::NonFiniteDerivative {
                        target: format!("{target}: coordinate {i} sits on the domain boundary"),
                    });
                }
                h = h.min(0.5 * room);
            }
            Ok(h)
        })
        .collect()
}

/// Central-difference gradient of `f` at `x`.
pub fn gradient<F>(mut f: F, x: &[f64], bounds: Option<&[(f64, f64)]>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let eps = f64::EPSILON.cbrt();
    let h = steps(x, bounds, eps, "gradient")?;
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + h[i];
        let fp = f(&xp)?;
        xp[i] = x[i] - h[i];
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h[i]);
        if !g[i].is_finite() {
            return Err(Error::NonFiniteDerivative {
                target: format!("gradient coordinate {i}"),
            });
        }
    }
    Ok(g)
}

/// Central-difference Hessian of `f` at `x`, symmetric by construction.
pub fn hessian<F>(mut f: F, x: &[f64], bounds: Option<&[(f64, f64)]>) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let eps = f64::EPSILON.powf(0.25);
    let h = steps(x, bounds, eps, "hessian")?;
    let p = x.len();
    let f0 = f(x)?;
    let mut xp = x.to_vec();
    let mut hess = DMatrix::zeros(p, p);
    for i in 0..p {
        xp[i] = x[i] + h[i];
        let fp = f(&xp)?;
        xp[i] = x[i] - h[i];
        let fm = f(&xp)?;
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in (i + 1)..p {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDerivative {
            target: "hessian".to_string(),
        });
    }
    Ok(hess)
}

/// Derivative of a scalar function of one variable.
pub fn scalar_derivative<F>(mut f: F, x: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let g = gradient(|v| f(v[0]), &[x], None)?;
    Ok(g[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_square() {
        let g = gradient(|x| Ok(x[0] * x[0]), &[3.0], None).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6, "got {}", g[0]);
    }

    #[test]
    fn hessian_of_bilinear() {
        let h = hessian(|x| Ok(x[0] * x[1]), &[0.3, -0.7], None).unwrap();
        assert!((h[(0, 0)]).abs() < 1e-4);
        assert!((h[(1, 1)]).abs() < 1e-4);
        assert!((h[(0, 1)] - 1.0).abs() < 1e-4);
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn stencil_respects_bounds() {
        // f is only defined on [0, 1]; a full step would leave the box.
        let near_edge = 1.0 - 1e-9;
        let g = gradient(
            |x| {
                assert!(
                    (0.0..=1.0).contains(&x[0]),
                    "stencil left the box: {}",
                    x[0]
                );
                Ok(x[0] * x[0])
            },
            &[near_edge],
            Some(&[(0.0, 1.0)]),
        )
        .unwrap();
        assert!((g[0] - 2.0 * near_edge).abs() < 1e-3);

        let on_edge = gradient(|x| Ok(x[0]), &[1.0], Some(&[(0.0, 1.0)]));
        assert!(matches!(on_edge, Err(Error::NonFiniteDerivative { .. })));
    }

    #[test]
    fn scalar_derivative_of_exp() {
        let d = scalar_derivative(|x| Ok(x.exp()), 0.5).unwrap();
        assert!((d - 0.5f64.exp()).abs() < 1e-6);
    }
}
