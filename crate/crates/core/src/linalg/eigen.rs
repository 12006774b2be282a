//! Cyclic Jacobi eigensolver for small dense symmetric matrices.
//!
//! This is the reference decomposition behind the exact wavelet basis and
//! the `wavelet` diagnostics. It is O(n³) per sweep and capped at
//! [`JACOBI_MAX_DIM`].

use super::dense::DenseMatrix;
use crate::error::{Error, Result};

pub const JACOBI_MAX_DIM: usize = 200;
const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl SymmetricEigen {
    /// `U diag(f(λ)) Uᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let g: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|l| u.get(i, l) * g[l] * u.get(j, l)).sum()
        })
    }
}

pub fn jacobi_eigh(a: &DenseMatrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("jacobi_eigh", format!("{:?} is not square", a.shape())));
    }
    if n > JACOBI_MAX_DIM {
        return Err(Error::Scope(format!(
            "dense eigensolver limited to n <= {JACOBI_MAX_DIM}, got {n}"
        )));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Data(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }

    let mut m = a.clone();
    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    let mut v = DenseMatrix::identity(n);
    let tol = OFF_DIAGONAL_TOL * a.frobenius_sq().sqrt().max(1.0);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let eigenvalues = order.iter().map(|&i| m.get(i, i)).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, k| v.get(i, order[k]));
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.get(i, j) * m.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Applies the rotation `m <- Jᵀ m J`, `v <- v J` in the (p, q) plane.
fn rotate(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m.set(p, k, c * mpk - s * mqk);
        m.set(q, k, s * mpk + c * mqk);
    }
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}
