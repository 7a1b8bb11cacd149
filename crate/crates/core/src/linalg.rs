//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn is_finite_vector(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn max_abs_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Induced 1-norm (max absolute column sum).
pub fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Projects a symmetric matrix onto the PSD cone by lifting negative
/// eigenvalues to `floor`. Matrices whose smallest eigenvalue is above a
/// rounding-level tolerance are returned unchanged.
pub fn project_psd(h: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(h);
    let scale = sym.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= -1e-12 * scale {
        return (sym, false);
    }
    let lifted = eig.eigenvalues.map(|l| if l < 0.0 { floor } else { l });
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&lifted) * v.transpose();
    (symmetrize(&rebuilt), true)
}

/// Symmetric square root factor `L` with `L Lᵀ = m` for a PSD matrix.
/// Negative rounding-level eigenvalues are treated as zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Block offsets for a list of block sizes.
pub fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in sizes {
        out.push(acc);
        acc += s;
    }
    out
}
