//! Small dense helpers on top of nalgebra used by the solvers and estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Conditioning above which a symmetric inverse gets ridge jitter.
pub const MAX_CONDITION: f64 = 1e12;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigen(a).0[0]
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Numerical rank with tolerance relative to the largest singular value.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.clone().singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Relative eigenvalue below which a PSD matrix is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-14;

/// Inverse of a symmetric PSD matrix. When the condition number exceeds
/// [`MAX_CONDITION`] a ridge of `1e-10 * trace / dim` is added first.
/// Returns `None` if the smallest eigenvalue is below `SINGULAR_TOL * top`.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let (mut values, vectors) = sym_eigen(a);
    let top = values[n - 1];
    if !(top > 0.0) || !top.is_finite() || values[0] <= SINGULAR_TOL * top {
        return None;
    }
    if top / values[0] > MAX_CONDITION {
        let jitter = 1e-10 * a.trace() / n as f64;
        values.apply(|v| *v += jitter);
    }
    let inv_diag = DMatrix::from_diagonal(&values.map(|v| 1.0 / v));
    Some(&vectors * inv_diag * vectors.transpose())
}

/// Moore-Penrose inverse of a symmetric PSD matrix together with the
/// orthogonal projector onto its range. Eigenvalues below `rel_tol * top`
/// count as zero.
pub fn psd_pseudo_inverse(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let (values, vectors) = sym_eigen(a);
    let top = values.iter().cloned().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(n, n);
    let mut proj = DMatrix::zeros(n, n);
    for (i, &v) in values.iter().enumerate() {
        if top > 0.0 && v > rel_tol * top {
            let u = vectors.column(i);
            pinv.ger(1.0 / v, &u, &u, 1.0);
            proj.ger(1.0, &u, &u, 1.0);
        }
    }
    (pinv, proj)
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(a))?;
    Some(chol.solve(b))
}

pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    nalgebra::Cholesky::new(symmetrize(a)).is_some()
}

/// Top-`k` left singular vectors of `z`, with each column's first entry of
/// non-negligible magnitude made positive. Also returns all singular values,
/// sorted descending.
pub fn top_left_singular(z: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let svd = z.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut basis = DMatrix::zeros(z.nrows(), k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut col = u.column(i).into_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        basis.set_column(c, &col);
    }
    (basis, values)
}

/// `x^T m x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_inverse_of_rank_one() {
        let u = DVector::from_vec(vec![3.0, 4.0]) / 5.0;
        let a = &u * u.transpose() * 2.0;
        let (pinv, proj) = psd_pseudo_inverse(&a, 1e-12);
        assert!((&pinv - &u * u.transpose() * 0.5).norm() < 1e-12);
        assert!((&proj - &u * u.transpose()).norm() < 1e-12);
    }

    #[test]
    fn eigen_sorted_ascending() {
        let a = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let (v, _) = sym_eigen(&a);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn inverse_of_singular_is_none() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(spd_inverse(&a).is_none());
    }

    #[test]
    fn inverse_round_trip() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = spd_inverse(&a).unwrap();
        let id = &a * inv;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn singular_vector_signs_are_positive() {
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -4.0]);
        let (b, s) = top_left_singular(&z, 1);
        assert!((s[0] - 4.0).abs() < 1e-12);
        assert!(b[(1, 0)] > 0.0);
    }
}
