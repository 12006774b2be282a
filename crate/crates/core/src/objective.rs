//! Composite training objective.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{MaskKind, ModalityGraph};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::model::Forward;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Doubly-stochastic penalty.
    pub alpha: f64,
    /// Weight decay.
    pub beta: f64,
    /// Between-modality consistency.
    pub gamma: f64,
    /// Within-modality smoothness.
    pub lambda_wm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 5e-4,
            gamma: 0.0,
            lambda_wm: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_wm", self.lambda_wm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn zero(tape: &mut Tape<'_>) -> Tensor {
    tape.constant(DenseMatrix::zeros(1, 1))
}

fn sum_terms(tape: &mut Tape<'_>, terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(zero(tape));
    };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `-Σ_m Σ_{i ∈ train(m)} ln Z_m(i, y_i)`.
pub fn cross_entropy(tape: &mut Tape<'_>, z_all: &[Tensor], graphs: &[ModalityGraph]) -> Result<Tensor> {
    masked_cross_entropy(tape, z_all, graphs, MaskKind::Train)
}

/// Negative log-likelihood summed over the nodes selected by `kind`.
pub fn masked_cross_entropy(
    tape: &mut Tape<'_>,
    z_all: &[Tensor],
    graphs: &[ModalityGraph],
    kind: MaskKind,
) -> Result<Tensor> {
    if z_all.len() != graphs.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} outputs for {} graphs", z_all.len(), graphs.len()),
        ));
    }
    let mut terms = Vec::new();
    let mut total_train = 0;
    for (m, (&z, g)) in z_all.iter().zip(graphs).enumerate() {
        let mut index = Vec::new();
        for i in g.mask_indices(kind) {
            let label = g.labels()[i]
                .ok_or_else(|| Error::Data(format!("modality {m}: {kind:?} node {i} has no label")))?;
            index.push((i, label));
        }
        if index.is_empty() {
            continue;
        }
        total_train += index.len();
        let picked = tape.gather(z, &index)?;
        let logs = tape.log(picked)?;
        terms.push(tape.sum_all(logs));
    }
    if total_train == 0 {
        return Err(Error::Data(format!("no {kind:?} nodes in any modality")));
    }
    let s = sum_terms(tape, terms)?;
    Ok(tape.scale(s, -1.0))
}

/// `Σ_i |Σ_j |p_ij| - 1| + Σ_j |Σ_i |p_ij| - 1|`, summed over all pairs.
pub fn dsm_loss(tape: &mut Tape<'_>, p_all: &[Tensor]) -> Result<Tensor> {
    let mut terms = Vec::new();
    for &p in p_all {
        let a = tape.abs(p);
        for sums in [tape.row_sums(a), tape.col_sums(a)] {
            let dev = tape.add_scalar(sums, -1.0);
            let dev = tape.abs(dev);
            terms.push(tape.sum_all(dev));
        }
    }
    sum_terms(tape, terms)
}

/// Sum of squared Frobenius norms of the given kernels.
pub fn weight_decay(tape: &mut Tape<'_>, kernels: &[Tensor]) -> Result<Tensor> {
    let terms = kernels.iter().map(|&w| tape.frobenius_sq(w)).collect();
    sum_terms(tape, terms)
}

/// `Σ_{m<e} ‖P̃ᵀ Z_m − Z_e‖² + ‖Z_m − P̃ Z_e‖²`.
pub fn between_modality_reg(tape: &mut Tape<'_>, z_all: &[Tensor], pairs: &[(usize, usize, Tensor)]) -> Result<Tensor> {
    let mut terms = Vec::new();
    for &(m, e, p) in pairs {
        let (zm, ze) = match (z_all.get(m), z_all.get(e)) {
            (Some(a), Some(b)) => (*a, *b),
            _ => {
                return Err(Error::shape(
                    "between_modality_reg",
                    format!("pair ({m}, {e}) outside {} modalities", z_all.len()),
                ))
            }
        };
        let pt = tape.transpose(p);
        let moved = tape.matmul(pt, zm)?;
        let d1 = tape.sub(moved, ze)?;
        terms.push(tape.frobenius_sq(d1));
        let back = tape.matmul(p, ze)?;
        let d2 = tape.sub(zm, back)?;
        terms.push(tape.frobenius_sq(d2));
    }
    sum_terms(tape, terms)
}

/// Weighted incidence operator `B` (one row per undirected edge `i < j`,
/// `+√a_ij` at `i`, `−√a_ij` at `j`) so that `‖B Z‖²_F = Σ a_ij ‖Z_i − Z_j‖²`.
pub fn edge_incidence(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    let mut triplets = Vec::new();
    let mut edge = 0;
    for (i, j, a) in adjacency.triplets() {
        if j <= i {
            continue;
        }
        if a < 0.0 {
            return Err(Error::Data(format!("negative edge weight {a} at ({i}, {j})")));
        }
        let r = a.sqrt();
        triplets.push((edge, i, r));
        triplets.push((edge, j, -r));
        edge += 1;
    }
    SparseMatrix::from_triplets(edge, adjacency.rows(), &triplets)
}

/// `Σ_m Σ_{i<j} a_ij ‖Z_m(i,:) − Z_m(j,:)‖²` using precomputed incidence
/// operators from [`edge_incidence`].
pub fn within_modality_reg<'a>(tape: &mut Tape<'a>, z_all: &[Tensor], incidences: &'a [SparseMatrix]) -> Result<Tensor> {
    if z_all.len() != incidences.len() {
        return Err(Error::shape(
            "within_modality_reg",
            format!("{} outputs for {} graphs", z_all.len(), incidences.len()),
        ));
    }
    let mut terms = Vec::new();
    for (&z, b) in z_all.iter().zip(incidences) {
        if b.rows() == 0 {
            continue;
        }
        let diffs = tape.spmm(b, z)?;
        terms.push(tape.frobenius_sq(diffs));
    }
    sum_terms(tape, terms)
}

/// Individual terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Tensor,
    pub cross_entropy: Tensor,
    pub dsm: Tensor,
    pub weight_decay: Tensor,
    pub between: Tensor,
    pub within: Tensor,
}

/// `CE + α DSM + β WD + γ BM + λ WM`.
pub fn total_objective<'a>(
    tape: &mut Tape<'a>,
    forward: &Forward,
    graphs: &[ModalityGraph],
    incidences: &'a [SparseMatrix],
    weights: &LossWeights,
) -> Result<ObjectiveTerms> {
    weights.validate()?;
    let ce = cross_entropy(tape, &forward.z, graphs)?;
    let p_all: Vec<Tensor> = forward.pairs.iter().map(|(_, _, p)| *p).collect();
    let dsm = dsm_loss(tape, &p_all)?;
    let wd = weight_decay(tape, &forward.weight_kernels())?;
    let bm = between_modality_reg(tape, &forward.z, &forward.pairs)?;
    let wm = within_modality_reg(tape, &forward.z, incidences)?;

    let mut total = ce;
    for (term, w) in [(dsm, weights.alpha), (wd, weights.beta), (bm, weights.gamma), (wm, weights.lambda_wm)] {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled)?;
    }
    Ok(ObjectiveTerms {
        total,
        cross_entropy: ce,
        dsm,
        weight_decay: wd,
        between: bm,
        within: wm,
    })
}
