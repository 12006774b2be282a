//! Reference implementations for tests.
//!
//! Everything here is written as plainly as possible and shares nothing with
//! the production code paths except the matrix containers. Nothing in this
//! crate is tuned for speed.

use mgwcn_core::linalg::{DenseMatrix, SparseMatrix};
use mgwcn_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Triple-loop product.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows(), "naive_matmul shape mismatch");
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn naive_transpose(a: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
}

pub fn diag(values: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { 0.0 })
}

pub fn add(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j))
}

pub fn sub(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - b.get(i, j))
}

pub fn relu(a: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j).max(0.0))
}

pub fn frobenius_sq(a: &DenseMatrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += a.get(i, j) * a.get(i, j);
        }
    }
    s
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut m: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            m = m.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    m
}

pub fn random_dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// Random sparse matrix with roughly `density` of entries nonzero.
pub fn random_sparse(rows: usize, cols: usize, density: f64, seed: u64) -> SparseMatrix {
    let mut r = rng(seed);
    let mut t = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if r.random::<f64>() < density {
                let mut v: f64 = r.random_range(-1.0..1.0);
                if v == 0.0 {
                    v = 0.5;
                }
                t.push((i, j, v));
            }
        }
    }
    SparseMatrix::from_triplets(rows, cols, &t).expect("valid triplets")
}

/// Unit-weight Erdős–Rényi graph.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> SparseMatrix {
    let mut r = rng(seed);
    let mut t = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.random::<f64>() < p {
                t.push((i, j, 1.0));
                t.push((j, i, 1.0));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &t).expect("valid triplets")
}

/// Symmetric graph with random positive weights.
pub fn weighted_random_graph(n: usize, p: f64, seed: u64) -> SparseMatrix {
    let mut r = rng(seed);
    let mut t = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.random::<f64>() < p {
                let w = r.random_range(0.1..2.0);
                t.push((i, j, w));
                t.push((j, i, w));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &t).expect("valid triplets")
}

pub fn path_graph(n: usize) -> SparseMatrix {
    let mut t = Vec::new();
    for i in 0..n.saturating_sub(1) {
        t.push((i, i + 1, 1.0));
        t.push((i + 1, i, 1.0));
    }
    SparseMatrix::from_triplets(n, n, &t).expect("valid triplets")
}

/// `I - D^{-1/2} A D^{-1/2}` built densely; isolated nodes get a zero row.
pub fn dense_normalized_laplacian(a: &SparseMatrix) -> DenseMatrix {
    let a = a.to_dense();
    let n = a.rows();
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
    DenseMatrix::from_fn(n, n, |i, j| {
        if deg[i] == 0.0 || deg[j] == 0.0 {
            return 0.0;
        }
        let off = a.get(i, j) / (deg[i] * deg[j]).sqrt();
        if i == j {
            1.0 - off
        } else {
            -off
        }
    })
}

/// Eigenvalues ascending with matching eigenvector columns, via nalgebra.
pub fn reference_eigh(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

/// `e^{c A}` by scaling and squaring of a Taylor series; no eigensolver.
pub fn expm_scaled(a: &DenseMatrix, c: f64) -> DenseMatrix {
    let n = a.rows();
    let mut norm: f64 = 0.0;
    for i in 0..n {
        norm = norm.max((0..n).map(|j| (c * a.get(i, j)).abs()).sum());
    }
    let mut squarings = 0;
    while norm / f64::powi(2.0, squarings) > 0.25 {
        squarings += 1;
    }
    let factor = c / f64::powi(2.0, squarings);
    let x = DenseMatrix::from_fn(n, n, |i, j| factor * a.get(i, j));
    let mut result = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=30 {
        term = naive_matmul(&term, &x);
        term = DenseMatrix::from_fn(n, n, |i, j| term.get(i, j) / k as f64);
        result = add(&result, &term);
    }
    for _ in 0..squarings {
        result = naive_matmul(&result, &result);
    }
    result
}

/// Exact heat kernel `e^{-sL}` of the normalized Laplacian of `a`.
pub fn heat_kernel(a: &SparseMatrix, s: f64) -> DenseMatrix {
    expm_scaled(&dense_normalized_laplacian(a), -s)
}

/// Exact inverse heat kernel `e^{sL}`.
pub fn inverse_heat_kernel(a: &SparseMatrix, s: f64) -> DenseMatrix {
    expm_scaled(&dense_normalized_laplacian(a), s)
}

/// Modified Bessel function `I_k(x)` by its ascending series.
pub fn bessel_i(k: usize, x: f64) -> f64 {
    let half = x / 2.0;
    let mut sum = 0.0;
    let mut fact_m = 1.0;
    for m in 0..80 {
        if m > 0 {
            fact_m *= m as f64;
        }
        let mut fact_mk = 1.0;
        for t in 1..=(m + k) {
            fact_mk *= t as f64;
        }
        sum += half.powi((2 * m + k) as i32) / (fact_m * fact_mk);
    }
    sum
}

/// Chebyshev coefficients of `e^{-a(x+1)}` on `[-1, 1]`:
/// `c_k = 2 e^{-a} (-1)^k I_k(a)`.
pub fn heat_chebyshev_coefficients(a: f64, order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            2.0 * (-a).exp() * sign * bessel_i(k, a)
        })
        .collect()
}

/// Nonnegative matrix with unit row and column sums, by alternating
/// normalization of a positive random matrix (500 sweeps).
pub fn random_doubly_stochastic(n: usize, seed: u64) -> DenseMatrix {
    assert!(n >= 1);
    let mut r = rng(seed);
    let mut p = DenseMatrix::from_fn(n, n, |_, _| r.random_range(0.05..1.0));
    for _ in 0..500 {
        for i in 0..n {
            let s: f64 = (0..n).map(|j| p.get(i, j)).sum();
            for j in 0..n {
                p.set(i, j, p.get(i, j) / s);
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| p.get(i, j)).sum();
            for i in 0..n {
                p.set(i, j, p.get(i, j) / s);
            }
        }
    }
    p
}

/// Random hard permutation matrix; row `i` has its 1 in column `perm[i]`.
pub fn random_permutation(n: usize, seed: u64) -> (Vec<usize>, DenseMatrix) {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng(seed));
    let m = DenseMatrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
    (perm, m)
}

fn activate(x: &DenseMatrix, relu_on: bool) -> DenseMatrix {
    if relu_on {
        relu(x)
    } else {
        x.clone()
    }
}

/// `σ(Ψ diag(θ) Ψ⁻¹ H W + X0 V)` evaluated left to right on dense operands.
#[allow(clippy::too_many_arguments)]
pub fn dense_agw(
    h: &DenseMatrix,
    x0: &DenseMatrix,
    psi: &DenseMatrix,
    psi_inv: &DenseMatrix,
    theta: &[f64],
    w: &DenseMatrix,
    v: &DenseMatrix,
    relu_on: bool,
) -> DenseMatrix {
    let op = naive_matmul(&naive_matmul(psi, &diag(theta)), psi_inv);
    let conv = naive_matmul(&naive_matmul(&op, h), w);
    activate(&add(&conv, &naive_matmul(x0, v)), relu_on)
}

/// `P (Ψ diag(θ) Ψ⁻¹) Pᵀ H`.
pub fn dense_cross_map(
    h_m: &DenseMatrix,
    psi_e: &DenseMatrix,
    psi_inv_e: &DenseMatrix,
    theta_e: &[f64],
    p: &DenseMatrix,
) -> DenseMatrix {
    let op = naive_matmul(&naive_matmul(psi_e, &diag(theta_e)), psi_inv_e);
    let conj = naive_matmul(&naive_matmul(p, &op), &naive_transpose(p));
    naive_matmul(&conj, h_m)
}

/// `σ([H, maps...] W)`.
pub fn dense_cross_layer(h: &DenseMatrix, maps: &[DenseMatrix], w: &DenseMatrix, relu_on: bool) -> DenseMatrix {
    let mut width = h.cols();
    for m in maps {
        width += m.cols();
    }
    let joined = DenseMatrix::from_fn(h.rows(), width, |i, j| {
        if j < h.cols() {
            return h.get(i, j);
        }
        let mut off = h.cols();
        for m in maps {
            if j < off + m.cols() {
                return m.get(i, j - off);
            }
            off += m.cols();
        }
        unreachable!()
    });
    activate(&naive_matmul(&joined, w), relu_on)
}

/// `‖Pᵀ Z_m − Z_e‖² + ‖Z_m − P Z_e‖²`.
pub fn dense_between(z_m: &DenseMatrix, z_e: &DenseMatrix, p: &DenseMatrix) -> f64 {
    frobenius_sq(&sub(&naive_matmul(&naive_transpose(p), z_m), z_e)) + frobenius_sq(&sub(z_m, &naive_matmul(p, z_e)))
}

/// `trace(Zᵀ (D − A) Z)`.
pub fn dirichlet_form(z: &DenseMatrix, a: &SparseMatrix) -> f64 {
    let a = a.to_dense();
    let n = a.rows();
    let l = DenseMatrix::from_fn(n, n, |i, j| {
        let d: f64 = (0..n).map(|k| a.get(i, k)).sum();
        if i == j {
            d - a.get(i, j)
        } else {
            -a.get(i, j)
        }
    });
    let q = naive_matmul(&naive_transpose(z), &naive_matmul(&l, z));
    (0..q.rows()).map(|i| q.get(i, i)).sum()
}

/// `Σ_i |Σ_j |p_ij| − 1| + Σ_j |Σ_i |p_ij| − 1|`.
pub fn dense_dsm(p: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..p.rows() {
        total += ((0..p.cols()).map(|j| p.get(i, j).abs()).sum::<f64>() - 1.0).abs();
    }
    for j in 0..p.cols() {
        total += ((0..p.rows()).map(|i| p.get(i, j).abs()).sum::<f64>() - 1.0).abs();
    }
    total
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Per-parameter outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiff {
    /// Largest relative error over entries with `|analytic| >= SMALL_GRAD`.
    pub max_rel: f64,
    /// Largest absolute error over all entries.
    pub max_abs: f64,
    /// Largest absolute error over entries with `|analytic| < SMALL_GRAD`.
    pub max_abs_small: f64,
    /// Entry with the largest relative error.
    pub worst: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub params: Vec<ParamDiff>,
}

pub const SMALL_GRAD: f64 = 1e-8;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

impl FiniteDiffReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs_small(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_small).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_rel() <= REL_TOL && self.max_abs_small() <= ABS_TOL
    }
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every entry of every
/// parameter, compared against `analytic`.
pub fn finite_diff_check<F>(mut f: F, params: &[DenseMatrix], analytic: &[DenseMatrix], h: f64) -> Result<FiniteDiffReport>
where
    F: FnMut(&[DenseMatrix]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work: Vec<DenseMatrix> = params.to_vec();
    let mut eval = |w: &[DenseMatrix]| -> Result<f64> {
        let v = f(w)?;
        if !v.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                detail: format!("objective evaluated to {v}"),
            });
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(params.len());
    for (p, a) in params.iter().zip(analytic) {
        assert_eq!(p.shape(), a.shape(), "analytic gradient shape");
        let idx = out.len();
        let mut diff = ParamDiff {
            max_rel: 0.0,
            max_abs: 0.0,
            max_abs_small: 0.0,
            worst: (0, 0),
        };
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                let x = p.get(i, j);
                work[idx].set(i, j, x + h);
                let up = eval(&work)?;
                work[idx].set(i, j, x - h);
                let down = eval(&work)?;
                work[idx].set(i, j, x);
                let numeric = (up - down) / (2.0 * h);
                let an = a.get(i, j);
                let err = (an - numeric).abs();
                diff.max_abs = diff.max_abs.max(err);
                if an.abs() < SMALL_GRAD {
                    diff.max_abs_small = diff.max_abs_small.max(err);
                } else {
                    let rel = err / an.abs().max(numeric.abs());
                    if rel > diff.max_rel {
                        diff.max_rel = rel;
                        diff.worst = (i, j);
                    }
                }
            }
        }
        out.push(diff);
    }
    Ok(FiniteDiffReport { params: out })
}
