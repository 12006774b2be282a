//! Graph containers and spectral preprocessing.
//!
//! A [`ModalityGraph`] holds one modality: a symmetric nonnegative adjacency,
//! per-node features, optional labels and the semi-supervised split masks.
//! [`SpectralPrep`] caches the normalized Laplacian, an estimate of its
//! largest eigenvalue and the rescaled operator `2L/λ_max - I` used by the
//! Chebyshev expansion.

use crate::error::{Error, Result};
use crate::linalg::{spmm, DenseMatrix, SparseMatrix};

const SYMMETRY_TOL: f64 = 1e-12;

/// Power iteration cap and residual tolerance for [`estimate_lambda_max`].
pub const POWER_ITERATIONS: usize = 200;
pub const POWER_TOL: f64 = 1e-7;

/// Which split mask to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGraph {
    adjacency: SparseMatrix,
    features: DenseMatrix,
    labels: Vec<Option<usize>>,
    train: Vec<bool>,
    val: Vec<bool>,
    test: Vec<bool>,
}

impl ModalityGraph {
    /// Validates the adjacency (symmetric, nonnegative, zero diagonal) and
    /// the feature/label counts. Masks start empty.
    pub fn new(adjacency: SparseMatrix, features: DenseMatrix, labels: Vec<Option<usize>>) -> Result<Self> {
        let n = adjacency.rows();
        if !adjacency.is_square() {
            return Err(Error::Data(format!("adjacency is {:?}, not square", adjacency.shape())));
        }
        if features.rows() != n {
            return Err(Error::Data(format!(
                "{} feature rows for {n} nodes",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} nodes", labels.len())));
        }
        validate_adjacency(&adjacency)?;
        Ok(Self {
            adjacency,
            features,
            labels,
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// One more than the largest label present (0 when unlabeled).
    pub fn n_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&c| c + 1)
    }

    pub fn mask(&self, kind: MaskKind) -> &[bool] {
        match kind {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }

    pub fn mask_indices(&self, kind: MaskKind) -> Vec<usize> {
        self.mask(kind)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Installs split masks; they must be disjoint and every train node labeled.
    pub fn with_masks(mut self, train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<Self> {
        let n = self.n_nodes();
        if train.len() != n || val.len() != n || test.len() != n {
            return Err(Error::Data("mask length differs from node count".into()));
        }
        for i in 0..n {
            let count = train[i] as u8 + val[i] as u8 + test[i] as u8;
            if count > 1 {
                return Err(Error::Data(format!("node {i} appears in more than one mask")));
            }
            if (train[i] || val[i] || test[i]) && self.labels[i].is_none() {
                return Err(Error::Data(format!("masked node {i} has no label")));
            }
        }
        self.train = train;
        self.val = val;
        self.test = test;
        Ok(self)
    }

    pub fn with_features(mut self, features: DenseMatrix) -> Result<Self> {
        if features.rows() != self.n_nodes() {
            return Err(Error::Data("feature row count differs from node count".into()));
        }
        self.features = features;
        Ok(self)
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        let inv = invert_permutation(perm, n)?;
        let trip: Vec<_> = self
            .adjacency
            .triplets()
            .map(|(i, j, v)| (inv[i], inv[j], v))
            .collect();
        let adjacency = SparseMatrix::from_triplets(n, n, &trip)?;
        let pick = |m: &[bool]| perm.iter().map(|&p| m[p]).collect::<Vec<_>>();
        Ok(Self {
            adjacency,
            features: self.features.select_rows(perm),
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        })
    }

    /// Scales each feature row to unit L1 norm (all-zero rows are left alone).
    pub fn row_normalized(mut self) -> Self {
        for i in 0..self.features.rows() {
            let row = self.features.row_mut(i);
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        self
    }
}

pub(crate) fn invert_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>> {
    if perm.len() != n {
        return Err(Error::Parameter(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    let mut inv = vec![usize::MAX; n];
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || inv[old] != usize::MAX {
            return Err(Error::Parameter("not a permutation".into()));
        }
        inv[old] = new;
    }
    Ok(inv)
}

fn validate_adjacency(a: &SparseMatrix) -> Result<()> {
    for (i, j, v) in a.triplets() {
        if v < 0.0 {
            return Err(Error::Data(format!("negative edge weight {v} at ({i}, {j})")));
        }
        if i == j {
            return Err(Error::Data(format!("self loop at node {i}")));
        }
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Data(format!("adjacency asymmetric by {asym:e}")));
    }
    Ok(())
}

/// `L = I - D^{-1/2} A D^{-1/2}`; isolated nodes get an all-zero row and column.
pub fn normalized_laplacian(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    if !adjacency.is_square() {
        return Err(Error::Data("adjacency must be square".into()));
    }
    if let Some((i, j, v)) = adjacency.triplets().find(|&(_, _, v)| v < 0.0) {
        return Err(Error::Data(format!("negative edge weight {v} at ({i}, {j})")));
    }
    let n = adjacency.rows();
    let deg = adjacency.row_sums();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut trip = Vec::with_capacity(adjacency.nnz() + n);
    for (i, &d) in deg.iter().enumerate() {
        if d > 0.0 {
            trip.push((i, i, 1.0));
        }
    }
    for (i, j, v) in adjacency.triplets() {
        trip.push((i, j, -v * inv_sqrt[i] * inv_sqrt[j]));
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Combinatorial Laplacian `D - A`.
pub fn combinatorial_laplacian(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    let n = adjacency.rows();
    let deg = adjacency.row_sums();
    let mut trip: Vec<_> = adjacency.triplets().map(|(i, j, v)| (i, j, -v)).collect();
    trip.extend(deg.iter().enumerate().map(|(i, &d)| (i, i, d)));
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration.
///
/// The start vector is deterministic and deliberately not constant: an
/// all-ones start is an exact null vector of the normalized Laplacian of
/// any regular graph. Iteration stops once the residual `‖Lv - ρv‖` falls
/// below `POWER_TOL·ρ`; if that never happens within `POWER_ITERATIONS`
/// steps the bound 2.0 (valid for normalized Laplacians) is returned.
pub fn estimate_lambda_max(l: &SparseMatrix) -> Result<f64> {
    if !l.is_square() {
        return Err(Error::Data("matrix must be square".into()));
    }
    let asym = l.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Data(format!("matrix asymmetric by {asym:e}")));
    }
    let n = l.rows();
    if n == 0 || l.values().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut v = DenseMatrix::from_fn(n, 1, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    normalize(&mut v);
    for _ in 0..POWER_ITERATIONS {
        let w = spmm(l, &v)?;
        let rho: f64 = v.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        let resid: f64 = w
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .map(|(wi, vi)| (wi - rho * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if rho > 0.0 && resid <= POWER_TOL * rho {
            return Ok(rho);
        }
        let norm = w.frobenius_sq().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w;
        normalize(&mut v);
    }
    Ok(2.0)
}

fn normalize(v: &mut DenseMatrix) {
    let norm = v.frobenius_sq().sqrt();
    if norm > 0.0 {
        v.as_mut_slice().iter_mut().for_each(|x| *x /= norm);
    }
}

/// `L̃ = (2/λ_max) L - I`.
pub fn rescale_laplacian(l: &SparseMatrix, lambda_max: f64) -> Result<SparseMatrix> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::Parameter(format!("lambda_max must be positive, got {lambda_max}")));
    }
    l.scaled(2.0 / lambda_max).add_diagonal(-1.0)
}

/// Normalized Laplacian, its largest-eigenvalue estimate and the rescaled
/// operator for one graph.
#[derive(Debug, Clone)]
pub struct SpectralPrep {
    pub laplacian: SparseMatrix,
    pub lambda_max: f64,
    pub rescaled: SparseMatrix,
}

impl SpectralPrep {
    pub fn from_adjacency(adjacency: &SparseMatrix) -> Result<Self> {
        let laplacian = normalized_laplacian(adjacency)?;
        let lambda_max = estimate_lambda_max(&laplacian)?;
        Self::with_lambda_max(laplacian, lambda_max)
    }

    /// Uses a caller-supplied `λ_max`, e.g. one computed on an isomorphic graph.
    pub fn with_lambda_max(laplacian: SparseMatrix, lambda_max: f64) -> Result<Self> {
        // An edgeless graph has L = 0; any positive scale keeps L̃ = -I valid.
        let lambda_max = if lambda_max > 0.0 { lambda_max } else { 2.0 };
        let rescaled = rescale_laplacian(&laplacian, lambda_max)?;
        Ok(Self {
            laplacian,
            lambda_max,
            rescaled,
        })
    }
}

/// Symmetric k-nearest-neighbour graph with Gaussian weights.
///
/// `(i, j)` is an edge when `j` is among the `k` nearest points of `i` or
/// vice versa (ties by lower index). Weights are `exp(-d²/σ²)` where `σ` is
/// the mean distance over all k-nearest pairs; when `σ = 0` every weight is 1.
pub fn knn_graph(features: &DenseMatrix, k: usize) -> Result<SparseMatrix> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("k must be in [1, {n}), got {k}")));
    }
    let dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut neighbours = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        total += cand.iter().map(|c| c.0).sum::<f64>();
        neighbours.push(cand);
    }
    let sigma = total / (n * k) as f64;
    let weight = |d: f64| if sigma > 0.0 { (-(d * d) / (sigma * sigma)).exp() } else { 1.0 };

    let mut edges = std::collections::BTreeMap::new();
    for (i, cand) in neighbours.iter().enumerate() {
        for &(d, j) in cand {
            let key = (i.min(j), i.max(j));
            edges.entry(key).or_insert(d);
        }
    }
    let mut trip = Vec::with_capacity(edges.len() * 2);
    for (&(i, j), &d) in &edges {
        // Underflowed Gaussian weights still mark an edge.
        let w = weight(d).max(f64::MIN_POSITIVE);
        trip.push((i, j, w));
        trip.push((j, i, w));
    }
    SparseMatrix::from_triplets(n, n, &trip)
}
