//! Small dense helpers shared by the covariance and estimation code.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalue clipping of a symmetric matrix: eigenvalues below `floor` are
/// raised to `floor`. With `floor = 0` this is the nearest PSD matrix in
/// Frobenius norm.
pub(crate) fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let mut shifted = sym.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= floor;
    }
    if shifted.cholesky().is_some() {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return eig.recompose();
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&clipped) * q.transpose()
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Factor a PSD matrix as `L Lᵀ`, dropping eigen-directions with eigenvalue
/// below `rel_cutoff * λ_max`. Returns an `n × r` matrix (possibly `r = 0`).
pub(crate) fn low_rank_factor(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lmax <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > rel_cutoff * lmax)
        .collect();
    let mut l = DMatrix::zeros(n, keep.len());
    for (col, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for i in 0..n {
            l[(i, col)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    l
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}
