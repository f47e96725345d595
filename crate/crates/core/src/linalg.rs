//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{NsiError, Result};

/// Relative jitter ladder tried when a symmetric system fails to factor.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Empirical second-moment matrix `AᵀB / n`.
pub fn cross_moment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows().max(1) as f64;
    a.tr_mul(b) / n
}

pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    cross_moment(a, a)
}

pub fn trace_average(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.trace() / a.nrows() as f64
}

/// Solve `A X = B` for symmetric positive-definite `A`.
///
/// Falls back to `A + ε·tr(A)/p·I` over the jitter ladder when the Cholesky
/// factorization fails; the jitter actually used is returned.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, 0.0));
        }
    }
    let scale = trace_average(a).abs().max(f64::MIN_POSITIVE);
    for eps in JITTER_LADDER {
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += eps * scale;
        }
        if let Some(chol) = shifted.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                log::warn!(
                    "{what}: matrix not positive definite, solved with relative jitter {eps:e}"
                );
                return Ok((x, eps));
            }
        }
    }
    Err(NsiError::Numerical(format!(
        "{what}: matrix is singular even after jitter 1e-6; increase the penalties"
    )))
}

pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let (x, _) = spd_solve(a, &rhs, what)?;
    Ok(x.column(0).into_owned())
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let id = DMatrix::identity(a.nrows(), a.ncols());
    spd_solve(a, &id, what).map(|(x, _)| x)
}

/// Symmetric pseudo-inverse square root; eigenvalues below `rel_tol · λ_max`
/// are treated as zero.
pub fn pinv_sqrt(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rel_tol * lmax;
    let p = a.nrows();
    let mut out = DMatrix::zeros(p, p);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut && lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam.sqrt();
        }
    }
    out
}

/// Numerical rank at tolerance `rel_tol · σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> (usize, DVector<f64>) {
    if a.is_empty() {
        return (0, DVector::zeros(0));
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let rank = sv
        .iter()
        .filter(|&&s| s > rel_tol * smax && s > 0.0)
        .count();
    (rank, sv)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with divisor `n - ddof`.
pub fn variance(xs: &[f64], ddof: usize) -> f64 {
    if xs.len() <= ddof {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - ddof) as f64
}

pub fn covariance(xs: &[f64], ys: &[f64], ddof: usize) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() <= ddof {
        return f64::NAN;
    }
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (xs.len() - ddof) as f64
}

/// Sample covariance matrix (divisor `n - ddof`) of the columns of `x`.
pub fn column_covariance(x: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let means = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    centered.tr_mul(&centered) / (n.saturating_sub(ddof).max(1)) as f64
}
