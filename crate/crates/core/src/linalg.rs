//! Small dense-matrix helpers shared across the crate.

use nalgebra::SymmetricEigen;

use crate::{real, Error, FloatScalar, Matrix, Result};

pub(crate) fn symmetrize<T: FloatScalar>(m: &Matrix<T>) -> Matrix<T> {
    (m + m.transpose()) * real::<T>(0.5)
}

pub(crate) fn max_abs_entry<T: FloatScalar>(m: &Matrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Largest `|m_ij - m_ji|` over all index pairs.
pub(crate) fn max_asymmetry<T: FloatScalar>(m: &Matrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn all_finite<T: FloatScalar>(m: &Matrix<T>) -> bool {
    m.iter().all(|x| x.to_f64().map(f64::is_finite).unwrap_or(false))
}

/// Eigenvalues of the symmetrized matrix, ascending.
pub(crate) fn symmetric_eigenvalues<T: FloatScalar>(m: &Matrix<T>) -> Vec<T> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<T> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are ordered"));
    vals
}

pub(crate) fn min_symmetric_eigenvalue<T: FloatScalar>(m: &Matrix<T>) -> T {
    symmetric_eigenvalues(m)
        .first()
        .copied()
        .unwrap_or_else(T::zero)
}

/// Spectral radius of a general square matrix.
pub(crate) fn spectral_radius<T: FloatScalar>(m: &Matrix<T>) -> T {
    m.complex_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, ev| acc.max(ev.re.hypot(ev.im)))
}

pub(crate) fn frobenius_distance<T: FloatScalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    (a - b).norm()
}

/// Log-determinant of a symmetric PSD matrix via its eigenvalues.
///
/// Stays in log space so entries many orders of magnitude apart (down to
/// the `1e-32` regularizers used for unobserved directions) survive.
/// Fails with [`Error::SingularArgument`] when any eigenvalue is at or
/// below `eps_det`.
pub(crate) fn log_det_psd<T: FloatScalar>(m: &Matrix<T>, eps_det: f64, label: &str) -> Result<T> {
    let vals = symmetric_eigenvalues(m);
    let floor = real::<T>(eps_det);
    let mut acc = T::zero();
    for v in &vals {
        if *v <= floor {
            return Err(Error::SingularArgument {
                what: label.to_string(),
                min_eig: v.to_f64().unwrap_or(f64::NAN),
            });
        }
        acc += v.ln();
    }
    Ok(acc)
}

/// A factor `F` with `F·Fᵀ = m` for symmetric PSD `m`, built from the
/// eigendecomposition with negative eigenvalues clamped to zero so that
/// rank-deficient covariances are accepted.
pub(crate) fn psd_factor<T: FloatScalar>(m: &Matrix<T>) -> Option<Matrix<T>> {
    if !all_finite(m) {
        return None;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut factor = eig.eigenvectors;
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        let scale = ev.max(T::zero()).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    if all_finite(&factor) {
        Some(factor)
    } else {
        None
    }
}
