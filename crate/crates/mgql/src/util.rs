//! Small numeric helpers shared across modules.

use nalgebra::DMatrix;

/// Neumaier compensated accumulator. Long per-observation sums feed exact
/// algebraic identities (likelihood decompositions, normal equations), so
/// plain summation error is kept out of those comparisons.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums an iterator with compensation.
pub(crate) fn csum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut a = Accum::default();
    for v in it {
        a.add(v);
    }
    a.value()
}

/// Serialize a `DMatrix<f64>` as a row-major `Vec<Vec<f64>>` so JSON reports
/// stay readable and independent of the linear algebra backend.
pub(crate) mod serde_mat {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// Symmetric square root M^{1/2} via eigendecomposition. Eigenvalues must be
/// nonnegative up to `tol` relative slack; small negatives are clamped to zero.
pub(crate) fn sym_sqrt(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let scale = sym
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut roots = sym.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol * scale.max(1.0) {
            return None;
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &sym.eigenvectors;
    Some(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Standard normal quantile Phi^{-1}(p) for p in (0, 1).
pub(crate) fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let std = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    std.inverse_cdf(p)
}
