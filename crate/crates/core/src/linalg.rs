use nalgebra::{DMatrix, SymmetricEigen};

pub fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Largest singular value.
pub fn spectral_norm(rows: &[Vec<f64>]) -> f64 {
    let m = to_matrix(rows);
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn frobenius_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn min_symmetric_eigenvalue(m: DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m).eigenvalues.min()
}
