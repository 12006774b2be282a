//! Spectral graph wavelet bases via Chebyshev expansion.
//!
//! The forward basis is the heat kernel `Ψ_s = U e^{-sΛ} Uᵀ` and its inverse
//! is `Ψ_s⁻¹ = U e^{sΛ} Uᵀ`. Both are expanded as
//! `½c₀ I + Σ_{i=1..Q} c_i T_i(L̃)` in the rescaled Laplacian, so no
//! eigendecomposition is needed; [`dense_wavelet_oracle`] computes the
//! exact operators for small graphs.
//!
//! Two coefficient rules are available. [`CoefficientRule::Quadrature`]
//! projects the kernel onto the Chebyshev basis with Gauss–Chebyshev
//! quadrature, taking the spectrum mapping `λ = λ_max (x + 1) / 2` into
//! account. [`CoefficientRule::BesselJ`] uses the closed form
//! `c_i = 2e^{-s} J_i(-s)`; it does not reproduce the heat kernel and is
//! kept only for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpectralPrep;
use crate::linalg::{jacobi_eigh, sparsify, spmm, DenseMatrix, SparseMatrix};

const BESSEL_MAX_TERMS: usize = 200;
const BESSEL_TERM_TOL: f64 = 1e-16;
const RADIUS_TOL: f64 = 1e-6;
const RADIUS_ITERATIONS: usize = 100;

/// Bessel function of the first kind `J_order(x)` by its ascending series.
pub fn bessel_j(order: usize, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=order {
        term *= half / k as f64;
    }
    if term == 0.0 {
        return 0.0;
    }
    let q = -half * half;
    let mut sum = term;
    for m in 1..BESSEL_MAX_TERMS {
        term *= q / (m as f64 * (m + order) as f64);
        sum += term;
        if term.abs() < BESSEL_TERM_TOL * sum.abs() {
            break;
        }
    }
    sum
}

/// How expansion coefficients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoefficientRule {
    /// Gauss–Chebyshev projection of `e^{∓sλ}`.
    #[default]
    Quadrature,
    /// `c_i = 2e^{-s} J_i(-s)` (inverse: `2e^{s} J_i(s)`).
    BesselJ,
}

impl std::str::FromStr for CoefficientRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quadrature" => Ok(Self::Quadrature),
            "bessel" | "bessel_j" => Ok(Self::BesselJ),
            other => Err(Error::Config(format!("unknown coefficient rule '{other}'"))),
        }
    }
}

/// Chebyshev coefficients `c_0..=c_order` of `f` on `[-1, 1]`, normalized so
/// that `f(x) ≈ c₀/2 + Σ c_k T_k(x)`.
pub fn chebyshev_coefficients(f: impl Fn(f64) -> f64, order: usize) -> Vec<f64> {
    let nodes = (4 * (order + 1)).max(128);
    let samples: Vec<(f64, f64)> = (0..nodes)
        .map(|j| {
            let theta = std::f64::consts::PI * (j as f64 + 0.5) / nodes as f64;
            (theta, f(theta.cos()))
        })
        .collect();
    (0..=order)
        .map(|k| {
            let s: f64 = samples.iter().map(|&(th, fx)| fx * (k as f64 * th).cos()).sum();
            2.0 * s / nodes as f64
        })
        .collect()
}

/// Forward and inverse coefficient sequences for scale `s`.
pub fn wavelet_coefficients(rule: CoefficientRule, s: f64, lambda_max: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
    match rule {
        CoefficientRule::Quadrature => {
            let a = 0.5 * s * lambda_max;
            let fwd = chebyshev_coefficients(|x| (-a * (x + 1.0)).exp(), order);
            let inv = chebyshev_coefficients(|x| (a * (x + 1.0)).exp(), order);
            (fwd, inv)
        }
        CoefficientRule::BesselJ => {
            let fwd = (0..=order).map(|i| 2.0 * (-s).exp() * bessel_j(i, -s)).collect();
            let inv = (0..=order).map(|i| 2.0 * s.exp() * bessel_j(i, s)).collect();
            (fwd, inv)
        }
    }
}

/// Construction parameters shared by every scale of a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletSettings {
    /// Highest Chebyshev order `Q`.
    pub order: usize,
    /// Entries below this magnitude are dropped from both operators.
    pub threshold: f64,
    pub rule: CoefficientRule,
}

impl Default for WaveletSettings {
    fn default() -> Self {
        Self {
            order: 40,
            threshold: 1e-4,
            rule: CoefficientRule::Quadrature,
        }
    }
}

/// Sparse wavelet operator pair for one scale.
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    pub scale: f64,
    pub psi: SparseMatrix,
    pub psi_inv: SparseMatrix,
    pub cheby_order: usize,
    pub threshold: f64,
}

impl WaveletBasis {
    pub fn identity(n: usize, settings: &WaveletSettings) -> Self {
        Self {
            scale: 0.0,
            psi: SparseMatrix::identity(n),
            psi_inv: SparseMatrix::identity(n),
            cheby_order: settings.order,
            threshold: settings.threshold,
        }
    }

    pub fn n(&self) -> usize {
        self.psi.rows()
    }
}

/// Estimates the spectral radius of a symmetric matrix from below.
fn spectral_radius_estimate(m: &SparseMatrix) -> Result<f64> {
    let n = m.rows();
    let mut v = DenseMatrix::from_fn(n, 1, |i, _| 1.0 + ((i as f64 + 1.0) * 0.754_877_666_246_692_7).fract());
    let mut est: f64 = 0.0;
    for _ in 0..RADIUS_ITERATIONS {
        let norm = v.frobenius_sq().sqrt();
        if norm == 0.0 {
            return Ok(est);
        }
        v = v.scaled(1.0 / norm);
        let w = spmm(m, &v)?;
        est = est.max(w.frobenius_sq().sqrt());
        v = w;
    }
    Ok(est)
}

/// Dense `Σ_{i=0..Q} c_i T_i(L̃)` for both coefficient sequences at once,
/// with the `i = 0` term halved.
fn chebyshev_sums(rescaled: &SparseMatrix, fwd: &[f64], inv: &[f64]) -> Result<(DenseMatrix, DenseMatrix)> {
    let n = rescaled.rows();
    let mut acc_f = DenseMatrix::identity(n).scaled(0.5 * fwd[0]);
    let mut acc_i = DenseMatrix::identity(n).scaled(0.5 * inv[0]);
    if fwd.len() == 1 {
        return Ok((acc_f, acc_i));
    }
    let mut prev = DenseMatrix::identity(n);
    let mut cur = rescaled.to_dense();
    acc_f.axpy(fwd[1], &cur)?;
    acc_i.axpy(inv[1], &cur)?;
    for k in 2..fwd.len() {
        let mut next = spmm(rescaled, &cur)?;
        for (x, &p) in next.as_mut_slice().iter_mut().zip(prev.as_slice()) {
            *x = 2.0 * *x - p;
        }
        acc_f.axpy(fwd[k], &next)?;
        acc_i.axpy(inv[k], &next)?;
        prev = std::mem::replace(&mut cur, next);
    }
    Ok((acc_f, acc_i))
}

/// Builds `Ψ_s` and `Ψ_s⁻¹` for one graph and scale.
pub fn chebyshev_wavelet(prep: &SpectralPrep, scale: f64, settings: &WaveletSettings) -> Result<WaveletBasis> {
    let rescaled = &prep.rescaled;
    if !rescaled.is_square() {
        return Err(Error::Data("rescaled Laplacian must be square".into()));
    }
    if settings.order == 0 {
        return Err(Error::Parameter("Chebyshev order must be at least 1".into()));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Parameter(format!("scale must be >= 0, got {scale}")));
    }
    if !(settings.threshold >= 0.0) {
        return Err(Error::Parameter("threshold must be >= 0".into()));
    }
    let asym = rescaled.asymmetry();
    if asym > 1e-12 {
        return Err(Error::Data(format!("rescaled Laplacian asymmetric by {asym:e}")));
    }
    let radius = spectral_radius_estimate(rescaled)?;
    if radius > 1.0 + RADIUS_TOL {
        return Err(Error::Data(format!(
            "rescaled Laplacian has spectral radius {radius} > 1"
        )));
    }
    let n = rescaled.rows();
    if scale == 0.0 {
        return Ok(WaveletBasis::identity(n, settings));
    }
    let (fwd, inv) = wavelet_coefficients(settings.rule, scale, prep.lambda_max, settings.order);
    let (psi, psi_inv) = chebyshev_sums(rescaled, &fwd, &inv)?;
    Ok(WaveletBasis {
        scale,
        psi: sparsify(&psi, settings.threshold)?,
        psi_inv: sparsify(&psi_inv, settings.threshold)?,
        cheby_order: settings.order,
        threshold: settings.threshold,
    })
}

/// Builds one basis per scale for a prepared graph.
pub fn build_bases(prep: &SpectralPrep, scales: &[f64], settings: &WaveletSettings) -> Result<Vec<WaveletBasis>> {
    scales.iter().map(|&s| chebyshev_wavelet(prep, s, settings)).collect()
}

/// Largest size accepted by the exact oracle.
pub const ORACLE_MAX_NODES: usize = 200;

fn exact_kernel(l: &SparseMatrix, s: f64, sign: f64) -> Result<DenseMatrix> {
    if l.rows() > ORACLE_MAX_NODES {
        return Err(Error::Scope(format!(
            "exact wavelet limited to n <= {ORACLE_MAX_NODES}, got {}",
            l.rows()
        )));
    }
    if s == 0.0 {
        return Ok(DenseMatrix::identity(l.rows()));
    }
    let eig = jacobi_eigh(&l.to_dense())?;
    Ok(eig.spectral_map(|lambda| (sign * s * lambda).exp()))
}

/// Exact heat-kernel basis `U e^{-sΛ} Uᵀ` of the (unrescaled) Laplacian.
pub fn dense_wavelet_oracle(l: &SparseMatrix, s: f64) -> Result<DenseMatrix> {
    exact_kernel(l, s, -1.0)
}

/// Exact inverse basis `U e^{sΛ} Uᵀ`.
pub fn dense_inverse_wavelet_oracle(l: &SparseMatrix, s: f64) -> Result<DenseMatrix> {
    exact_kernel(l, s, 1.0)
}
