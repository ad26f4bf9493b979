//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

pub fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues clamped at zero.
///
/// Returns `None` if an eigenvalue is below `-neg_tol`.
pub fn sqrtm_psd(s: &Mat, neg_tol: f64) -> Option<Mat> {
    let eig = symmetrize(s).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -neg_tol) {
        return None;
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `S^{-1/2}` for a positive definite matrix.
pub fn inv_sqrtm_pd(s: &Mat) -> Option<Mat> {
    let eig = symmetrize(s).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn max_eigenvalue_sym(s: &Mat) -> f64 {
    symmetrize(s).symmetric_eigen().eigenvalues.max()
}

pub fn min_eigenvalue_sym(s: &Mat) -> f64 {
    symmetrize(s).symmetric_eigen().eigenvalues.min()
}

pub fn spectral_radius(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Moore-Penrose pseudo-inverse with relative cutoff.
pub fn pinv(a: &Mat) -> Mat {
    if a.is_empty() {
        return Mat::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12 * a.nrows().max(a.ncols()) as f64;
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let sinv = Mat::from_diagonal(&svd.singular_values.map(|s| if s > cutoff { 1.0 / s } else { 0.0 }));
    vt.transpose() * sinv * u.transpose()
}

pub fn rank(a: &Mat, tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    a.clone().svd(false, false).singular_values.iter().filter(|&&s| s > tol).count()
}

/// Solves `X = A X Aᵀ + Q` by squared Smith iteration. Requires ρ(A) < 1.
pub fn dlyap(a: &Mat, q: &Mat) -> Option<Mat> {
    if spectral_radius(a) >= 1.0 {
        return None;
    }
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        ak = &ak * &ak;
        if inc.norm() <= 1e-15 * x.norm().max(1.0) {
            return Some(symmetrize(&x));
        }
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(symmetrize(&x))
    } else {
        None
    }
}

/// Induced 2-norm of `M` in the weighted norm `‖x‖_D = sqrt(xᵀDx)`:
/// `‖D^{1/2} M D^{-1/2}‖₂`.
pub fn weighted_induced_norm(m: &Mat, d_sqrt: &Mat, d_inv_sqrt: &Mat) -> f64 {
    spectral_norm(&(d_sqrt * m * d_inv_sqrt))
}

pub fn weighted_norm(x: &[f64], d: &Mat) -> f64 {
    let v = Vect::from_column_slice(x);
    (v.transpose() * d * &v)[(0, 0)].max(0.0).sqrt()
}
