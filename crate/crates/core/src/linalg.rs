//! Small dense helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) fn cholesky(m: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{context}: non-finite precision matrix")));
    }
    Cholesky::new(m).ok_or_else(|| Error::numerical(format!("{context}: matrix not positive definite")))
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Draw from N(Q⁻¹b, Q⁻¹) given the Cholesky factor of the precision Q.
/// Returns `(mean, draw)`.
pub(crate) fn gaussian_from_precision<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    b: &DVector<f64>,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let mean = chol.solve(b);
    let mut z = standard_normal_vector(b.len(), rng);
    // Q = L Lᵀ, so L⁻ᵀ z has covariance Q⁻¹.
    let lt = chol.l().transpose();
    if !lt.solve_upper_triangular_mut(&mut z) {
        // The factor of a positive definite matrix has a non-zero diagonal.
        unreachable!("cholesky factor with zero pivot");
    }
    let draw = &mean + z;
    (mean, draw)
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub fn center_columns(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, mu) in out.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-mu);
    }
    out
}

/// Per-column sample variance with denominator `n - 1`.
pub fn column_variances(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    DVector::from_iterator(
        m.ncols(),
        m.column_iter().map(|c| {
            if n < 2 {
                return 0.0;
            }
            let mu = c.sum() / n as f64;
            c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64
        }),
    )
}

/// Trace of the empirical covariance of the columns (denominator `n - 1`).
pub fn covariance_trace(m: &DMatrix<f64>) -> f64 {
    column_variances(m).sum()
}

/// Empirical covariance of the columns (denominator `n - 1`).
pub fn covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let centered = center_columns(m, &column_means(m));
    let mut cov = centered.tr_mul(&centered);
    cov /= (n.saturating_sub(1)).max(1) as f64;
    cov
}

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_draw_has_requested_moments() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let chol = cholesky(q.clone(), "test").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            let (m, d) = gaussian_from_precision(&chol, &b, &mut rng);
            mean = m;
            sum += &d;
            outer += &d * d.transpose();
        }
        let emp_mean = &sum / n as f64;
        let emp_cov = &outer / n as f64 - &emp_mean * emp_mean.transpose();
        let cov = q.try_inverse().unwrap();
        assert!((&emp_mean - &mean).amax() < 0.01);
        assert!((&emp_cov - &cov).amax() < 0.01);
    }

    #[test]
    fn variance_uses_unbiased_denominator() {
        let m = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(column_variances(&m)[0], 1.0);
        assert_eq!(covariance_trace(&m), 1.0);
    }
}
