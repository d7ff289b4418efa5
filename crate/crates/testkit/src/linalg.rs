//! Small dense linear algebra by cyclic Jacobi rotation. Slow and simple.

use crate::compensated_sum;

pub type Mat = Vec<Vec<f64>>;

pub fn transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| compensated_sum((0..inner).map(|k| row[k] * b[k][j])))
                .collect()
        })
        .collect()
}

pub fn frobenius(a: &Mat) -> f64 {
    compensated_sum(a.iter().flatten().map(|x| x * x)).sqrt()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Largest singular value, via the eigenvalues of `A^T A`.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() || a[0].is_empty() {
        return 0.0;
    }
    let ata = matmul(&transpose(a), a);
    symmetric_eigenvalues(&ata)
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0)
        .sqrt()
}

/// `sum_i w_i x_i x_i^T`.
pub fn weighted_second_moment(points: &[Vec<f64>], weights: &[f64], dim: usize) -> Mat {
    (0..dim)
        .map(|r| {
            (0..dim)
                .map(|c| compensated_sum(points.iter().zip(weights).map(|(p, w)| w * p[r] * p[c])))
                .collect()
        })
        .collect()
}
