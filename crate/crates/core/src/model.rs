//! Network layers and the three forward-pass variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::ModalityGraph;
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::rng::StreamRng;
use crate::wavelet::{WaveletBasis, WaveletSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Gwcn,
    MvGwcn,
    MGwcn,
}

impl Mode {
    pub fn is_multimodal(self) -> bool {
        !matches!(self, Mode::Gwcn)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gwcn" => Ok(Mode::Gwcn),
            "mv-gwcn" | "mvgwcn" => Ok(Mode::MvGwcn),
            "m-gwcn" | "mgwcn" => Ok(Mode::MGwcn),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected GWCN, MV-GWCN or M-GWCN)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gwcn => "GWCN",
            Mode::MvGwcn => "MV-GWCN",
            Mode::MGwcn => "M-GWCN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Tensor) -> Tensor {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub n_modalities: usize,
    pub n_layers: usize,
    pub scales: Vec<f64>,
    /// Output width of each wavelet layer; length `n_layers`.
    pub hidden_dims: Vec<usize>,
    /// Output width of the cross-modality layer.
    pub cross_dim: usize,
    pub wavelet: WaveletSettings,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub n_classes: usize,
    /// Which entry of `scales` the cross-modality layer uses.
    pub cross_scale_index: usize,
    /// Relative jitter applied to the uniform correspondence initialization.
    pub p_init_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gwcn,
            n_modalities: 1,
            n_layers: 2,
            scales: vec![0.7, 1.0],
            hidden_dims: vec![16, 16],
            cross_dim: 16,
            wavelet: WaveletSettings::default(),
            dropout_rate: 0.0,
            activation: Activation::Relu,
            n_classes: 2,
            cross_scale_index: 0,
            p_init_noise: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.n_modalities == 0 {
            return cfg("n_modalities must be at least 1".into());
        }
        match self.mode {
            Mode::Gwcn if self.n_modalities != 1 => {
                return cfg(format!("mode GWCN needs exactly one modality, got {}", self.n_modalities))
            }
            Mode::MvGwcn | Mode::MGwcn if self.n_modalities < 2 => {
                return cfg(format!(
                    "mode {} needs at least two modalities; use mode GWCN for a single modality",
                    self.mode
                ))
            }
            _ => {}
        }
        if self.n_layers == 0 {
            return cfg("n_layers must be at least 1".into());
        }
        if self.hidden_dims.len() != self.n_layers {
            return cfg(format!(
                "hidden_dims has {} entries but n_layers = {}",
                self.hidden_dims.len(),
                self.n_layers
            ));
        }
        if self.hidden_dims.contains(&0) || self.cross_dim == 0 {
            return cfg("layer widths must be positive".into());
        }
        if self.scales.is_empty() {
            return cfg("scales must be nonempty".into());
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return cfg(format!("scales must be finite and nonnegative, got {s}"));
        }
        if self.cross_scale_index >= self.scales.len() {
            return cfg(format!(
                "cross_scale_index {} out of range for {} scales",
                self.cross_scale_index,
                self.scales.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return cfg(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.n_classes == 0 {
            return cfg("n_classes must be at least 1".into());
        }
        if self.wavelet.order == 0 {
            return cfg("cheby_order must be at least 1".into());
        }
        if !(self.wavelet.threshold >= 0.0) {
            return cfg(format!("wavelet_threshold must be nonnegative, got {}", self.wavelet.threshold));
        }
        if !(self.p_init_noise >= 0.0 && self.p_init_noise < 1.0) {
            return cfg(format!("p_init_noise must be in [0, 1), got {}", self.p_init_noise));
        }
        Ok(())
    }

    /// Width of the embedding fed to the classifier.
    pub fn classifier_input_dim(&self) -> usize {
        if self.mode.is_multimodal() {
            self.cross_dim
        } else {
            self.hidden_dims[self.n_layers - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution, cross-modality and classifier kernels (weight-decayed).
    Weight,
    /// Initial-feature residual maps.
    Residual,
    /// Diagonal wavelet-domain filters.
    Theta,
    /// Relaxed correspondence matrices.
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    /// `[layer][scale]`, each `f_k × f_{k+1}`.
    pub w: Vec<Vec<DenseMatrix>>,
    /// `[layer]`, each `d × f_{k+1}`.
    pub v: Vec<DenseMatrix>,
    /// `[layer][scale]`, each an `n × 1` diagonal.
    pub theta: Vec<Vec<DenseMatrix>>,
    /// Filter used when this modality's wavelet operator re-expresses
    /// another modality; multimodal modes only.
    pub cross_theta: Option<DenseMatrix>,
    pub cross_w: Option<DenseMatrix>,
    pub classifier: DenseMatrix,
}

/// Correspondence between modalities `m < e`, stored as `N_m × N_e`.
/// The reverse direction uses its transpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub m: usize,
    pub e: usize,
    pub p: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub modalities: Vec<ModalityParams>,
    pub pairs: Vec<PairParams>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-r..=r))
}

/// Per-modality `(n_nodes, feature_dim)` as needed by initialization.
pub fn modality_dims(graphs: &[ModalityGraph]) -> Vec<(usize, usize)> {
    graphs.iter().map(|g| (g.n_nodes(), g.feature_dim())).collect()
}

impl ModelParams {
    /// Glorot kernels, identity filters, and (multimodal) correspondences
    /// near `1/N_e` jittered by `p_init_noise`.
    pub fn init(cfg: &ModelConfig, dims: &[(usize, usize)], rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        if dims.len() != cfg.n_modalities {
            return Err(Error::Config(format!(
                "config expects {} modalities, data has {}",
                cfg.n_modalities,
                dims.len()
            )));
        }
        let n_scales = cfg.scales.len();
        let mut modalities = Vec::with_capacity(dims.len());
        for &(n, d) in dims {
            let mut w = Vec::new();
            let mut v = Vec::new();
            let mut theta = Vec::new();
            let mut fan_in = d;
            for &f_out in &cfg.hidden_dims {
                w.push((0..n_scales).map(|_| glorot(fan_in, f_out, rng)).collect());
                v.push(glorot(d, f_out, rng));
                theta.push((0..n_scales).map(|_| DenseMatrix::filled(n, 1, 1.0)).collect());
                fan_in = f_out;
            }
            let f_k = fan_in;
            let (cross_theta, cross_w) = if cfg.mode.is_multimodal() {
                (
                    Some(DenseMatrix::filled(n, 1, 1.0)),
                    Some(glorot(cfg.n_modalities * f_k, cfg.cross_dim, rng)),
                )
            } else {
                (None, None)
            };
            let classifier = glorot(cfg.classifier_input_dim(), cfg.n_classes, rng);
            modalities.push(ModalityParams {
                w,
                v,
                theta,
                cross_theta,
                cross_w,
                classifier,
            });
        }
        let mut pairs = Vec::new();
        if cfg.mode.is_multimodal() {
            for m in 0..dims.len() {
                for e in m + 1..dims.len() {
                    let (nm, ne) = (dims[m].0, dims[e].0);
                    let base = 1.0 / ne as f64;
                    let noise = cfg.p_init_noise;
                    let p = DenseMatrix::from_fn(nm, ne, |_, _| {
                        if noise > 0.0 {
                            base * (1.0 + rng.random_range(-noise..noise))
                        } else {
                            base
                        }
                    });
                    pairs.push(PairParams { m, e, p });
                }
            }
        }
        Ok(Self { modalities, pairs })
    }

    /// Replaces every correspondence with the given fixed matrices, which
    /// must be hard assignments (one 1 per row, rest 0).
    pub fn with_fixed_correspondences(mut self, fixed: Vec<PairParams>) -> Result<Self> {
        for pair in &fixed {
            let p = &pair.p;
            for i in 0..p.rows() {
                let row = p.row(i);
                let ones = row.iter().filter(|&&x| x == 1.0).count();
                if ones != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(Error::Data(format!(
                        "correspondence ({}, {}) row {i} is not a hard assignment",
                        pair.m, pair.e
                    )));
                }
            }
        }
        let mut sorted = fixed;
        sorted.sort_by_key(|p| (p.m, p.e));
        let expected: Vec<_> = self.pairs.iter().map(|p| (p.m, p.e, p.p.shape())).collect();
        let got: Vec<_> = sorted.iter().map(|p| (p.m, p.e, p.p.shape())).collect();
        if expected != got {
            return Err(Error::shape(
                "with_fixed_correspondences",
                format!("expected pairs {expected:?}, got {got:?}"),
            ));
        }
        self.pairs = sorted;
        Ok(self)
    }

    /// Flat view in a fixed order shared by [`Self::slots_mut`].
    pub fn slots(&self) -> Vec<(ParamKind, &DenseMatrix)> {
        let mut out = Vec::new();
        for mp in &self.modalities {
            for (ws, (v, thetas)) in mp.w.iter().zip(mp.v.iter().zip(&mp.theta)) {
                out.extend(ws.iter().map(|w| (ParamKind::Weight, w)));
                out.push((ParamKind::Residual, v));
                out.extend(thetas.iter().map(|t| (ParamKind::Theta, t)));
            }
            if let Some(t) = &mp.cross_theta {
                out.push((ParamKind::Theta, t));
            }
            if let Some(w) = &mp.cross_w {
                out.push((ParamKind::Weight, w));
            }
            out.push((ParamKind::Weight, &mp.classifier));
        }
        out.extend(self.pairs.iter().map(|p| (ParamKind::Permutation, &p.p)));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<(ParamKind, &mut DenseMatrix)> {
        let mut out = Vec::new();
        for mp in &mut self.modalities {
            for (ws, (v, thetas)) in mp.w.iter_mut().zip(mp.v.iter_mut().zip(&mut mp.theta)) {
                out.extend(ws.iter_mut().map(|w| (ParamKind::Weight, w)));
                out.push((ParamKind::Residual, v));
                out.extend(thetas.iter_mut().map(|t| (ParamKind::Theta, t)));
            }
            if let Some(t) = &mut mp.cross_theta {
                out.push((ParamKind::Theta, t));
            }
            if let Some(w) = &mut mp.cross_w {
                out.push((ParamKind::Weight, w));
            }
            out.push((ParamKind::Weight, &mut mp.classifier));
        }
        out.extend(self.pairs.iter_mut().map(|p| (ParamKind::Permutation, &mut p.p)));
        out
    }

    pub fn pair(&self, m: usize, e: usize) -> Option<&PairParams> {
        self.pairs.iter().find(|p| p.m == m && p.e == e)
    }

    /// Checks every tensor shape against a freshly initialized layout.
    pub fn check_shapes(&self, cfg: &ModelConfig, dims: &[(usize, usize)]) -> Result<()> {
        let mut rng = crate::rng::stream(0, "shape-check");
        let reference = ModelParams::init(cfg, dims, &mut rng)?;
        let mine = self.slots();
        let theirs = reference.slots();
        if mine.len() != theirs.len() {
            return Err(Error::shape(
                "check_shapes",
                format!("{} parameter tensors, expected {}", mine.len(), theirs.len()),
            ));
        }
        for (k, ((ka, a), (kb, b))) in mine.iter().zip(&theirs).enumerate() {
            if ka != kb || a.shape() != b.shape() || a.len() != a.rows() * a.cols() {
                return Err(Error::shape(
                    "check_shapes",
                    format!("tensor {k}: {:?} {:?}, expected {:?} {:?}", ka, a.shape(), kb, b.shape()),
                ));
            }
            if !a.is_finite() {
                return Err(Error::Data(format!("tensor {k} holds non-finite values")));
            }
        }
        for (a, b) in self.pairs.iter().zip(&reference.pairs) {
            if (a.m, a.e) != (b.m, b.e) {
                return Err(Error::shape("check_shapes", format!("pair ({}, {}) out of order", a.m, a.e)));
            }
        }
        Ok(())
    }
}

/// One wavelet convolution unit:
/// `σ(Ψ diag(θ) Ψ⁻¹ H W + dropout(X0) V)`.
#[allow(clippy::too_many_arguments)]
pub fn agw_forward<'a>(
    tape: &mut Tape<'a>,
    h_prev: Tensor,
    x0: Tensor,
    basis: &'a WaveletBasis,
    theta: Tensor,
    w: Tensor,
    v: Tensor,
    activation: Activation,
    dropout_rate: f64,
    training: bool,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let n = tape.value(h_prev).rows();
    if basis.n() != n || tape.value(x0).rows() != n {
        return Err(Error::shape(
            "agw_forward",
            format!(
                "basis {}, H {:?}, X0 {:?}",
                basis.n(),
                tape.value(h_prev).shape(),
                tape.value(x0).shape()
            ),
        ));
    }
    let hw = tape.matmul(h_prev, w)?;
    let spectral = tape.spmm(&basis.psi_inv, hw)?;
    let filtered = tape.scale_rows(spectral, theta)?;
    let conv = tape.spmm(&basis.psi, filtered)?;
    let x = tape.dropout(x0, dropout_rate, training, rng)?;
    let residual = tape.matmul(x, v)?;
    let pre = tape.add(conv, residual)?;
    Ok(activation.apply(tape, pre))
}

/// Elementwise mean of per-scale outputs.
pub fn magw_forward(tape: &mut Tape<'_>, outputs: &[Tensor]) -> Result<Tensor> {
    let (&first, rest) = outputs
        .split_first()
        .ok_or_else(|| Error::Parameter("magw_forward needs at least one scale output".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / outputs.len() as f64))
}

/// `P Ψ_e diag(θ_e) Ψ_e⁻¹ Pᵀ H_m` with `P` of shape `N_m × N_e`.
pub fn cross_modal_map<'a>(
    tape: &mut Tape<'a>,
    h_m: Tensor,
    basis_e: &'a WaveletBasis,
    theta_e: Tensor,
    p_me: Tensor,
) -> Result<Tensor> {
    let (pm, pe) = tape.value(p_me).shape();
    if tape.value(h_m).rows() != pm || basis_e.n() != pe {
        return Err(Error::shape(
            "cross_modal_map",
            format!(
                "P {:?}, H {:?}, basis {}",
                (pm, pe),
                tape.value(h_m).shape(),
                basis_e.n()
            ),
        ));
    }
    let pt = tape.transpose(p_me);
    let moved = tape.matmul(pt, h_m)?;
    let spectral = tape.spmm(&basis_e.psi_inv, moved)?;
    let filtered = tape.scale_rows(spectral, theta_e)?;
    let conv = tape.spmm(&basis_e.psi, filtered)?;
    tape.matmul(p_me, conv)
}

/// `σ([H_m, Ĥ_m] W_m)` for every modality, where `maps[m]` lists the
/// cross-modal maps into modality `m` in ascending order of source.
pub fn cross_modal_layer(
    tape: &mut Tape<'_>,
    h_all: &[Tensor],
    maps: &[Vec<Tensor>],
    w_cross: &[Tensor],
    activation: Activation,
) -> Result<Vec<Tensor>> {
    if maps.len() != h_all.len() || w_cross.len() != h_all.len() {
        return Err(Error::shape(
            "cross_modal_layer",
            format!("{} modalities, {} map lists, {} kernels", h_all.len(), maps.len(), w_cross.len()),
        ));
    }
    let mut out = Vec::with_capacity(h_all.len());
    for m in 0..h_all.len() {
        let mut parts = vec![h_all[m]];
        parts.extend_from_slice(&maps[m]);
        let joined = tape.concat_cols(&parts)?;
        let pre = tape.matmul(joined, w_cross[m])?;
        out.push(activation.apply(tape, pre));
    }
    Ok(out)
}

/// Row-wise softmax of `H W`.
pub fn classify(tape: &mut Tape<'_>, h: Tensor, w_cls: Tensor) -> Result<Tensor> {
    let logits = tape.matmul(h, w_cls)?;
    Ok(tape.softmax_rows(logits))
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn gcn_normalized_adjacency(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    let tilde = adjacency.add_diagonal(1.0)?;
    let d = tilde.row_sums();
    let triplets: Vec<_> = tilde.triplets().map(|(i, j, v)| (i, j, v / (d[i] * d[j]).sqrt())).collect();
    SparseMatrix::from_triplets(tilde.rows(), tilde.cols(), &triplets)
}

/// `σ(Â H W)`.
pub fn gcn_layer<'a>(
    tape: &mut Tape<'a>,
    a_hat: &'a SparseMatrix,
    h: Tensor,
    w: Tensor,
    activation: Activation,
) -> Result<Tensor> {
    let hw = tape.matmul(h, w)?;
    let mixed = tape.spmm(a_hat, hw)?;
    Ok(activation.apply(tape, mixed))
}

/// Tape handles produced by [`forward_full`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Class distributions per modality.
    pub z: Vec<Tensor>,
    /// One handle per entry of [`ModelParams::slots`], same order.
    pub params: Vec<Tensor>,
    pub kinds: Vec<ParamKind>,
    /// `(m, e, P̃_{m,e})` for each stored pair.
    pub pairs: Vec<(usize, usize, Tensor)>,
}

impl Forward {
    pub fn weight_kernels(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == ParamKind::Weight)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Full network: stacked multi-scale wavelet layers, then (multimodal modes)
/// one cross-modality layer, then the classifier. `bases[m][s]` pairs
/// modality `m` with `cfg.scales[s]`.
pub fn forward_full<'a>(
    tape: &mut Tape<'a>,
    graphs: &[ModalityGraph],
    bases: &'a [Vec<WaveletBasis>],
    params: &ModelParams,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut StreamRng,
) -> Result<Forward> {
    cfg.validate()?;
    if graphs.len() != cfg.n_modalities || bases.len() != cfg.n_modalities || params.modalities.len() != cfg.n_modalities
    {
        return Err(Error::Config(format!(
            "config expects {} modalities; got {} graphs, {} basis sets, {} parameter sets",
            cfg.n_modalities,
            graphs.len(),
            bases.len(),
            params.modalities.len()
        )));
    }
    for (m, (g, bs)) in graphs.iter().zip(bases).enumerate() {
        if bs.len() != cfg.scales.len() || bs.iter().any(|b| b.n() != g.n_nodes()) {
            return Err(Error::Config(format!(
                "modality {m}: bases do not match {} scales over {} nodes",
                cfg.scales.len(),
                g.n_nodes()
            )));
        }
    }

    let trainable_p = cfg.mode == Mode::MGwcn;
    let mut handles = Vec::new();
    let mut kinds = Vec::new();
    for (kind, value) in params.slots() {
        let rg = kind != ParamKind::Permutation || trainable_p;
        handles.push(tape.leaf(value.clone(), rg));
        kinds.push(kind);
    }

    // Walk the handles in the same order `slots` produced them.
    let mut cursor = handles.iter().copied();
    let mut next = || cursor.next().expect("slot layout");
    struct ModalityHandles {
        w: Vec<Vec<Tensor>>,
        v: Vec<Tensor>,
        theta: Vec<Vec<Tensor>>,
        cross_theta: Option<Tensor>,
        cross_w: Option<Tensor>,
        classifier: Tensor,
    }
    let mut mh = Vec::new();
    for mp in &params.modalities {
        let mut w = Vec::new();
        let mut v = Vec::new();
        let mut theta = Vec::new();
        for (ws, ts) in mp.w.iter().zip(&mp.theta) {
            w.push(ws.iter().map(|_| next()).collect());
            v.push(next());
            theta.push(ts.iter().map(|_| next()).collect());
        }
        let cross_theta = mp.cross_theta.as_ref().map(|_| next());
        let cross_w = mp.cross_w.as_ref().map(|_| next());
        let classifier = next();
        mh.push(ModalityHandles {
            w,
            v,
            theta,
            cross_theta,
            cross_w,
            classifier,
        });
    }
    let pairs: Vec<(usize, usize, Tensor)> = params.pairs.iter().map(|p| (p.m, p.e, next())).collect();

    let mut embeddings = Vec::with_capacity(graphs.len());
    for (m, g) in graphs.iter().enumerate() {
        let h = &mh[m];
        if h.w.len() != cfg.n_layers || h.w.iter().any(|ws| ws.len() != cfg.scales.len()) {
            return Err(Error::Config(format!("modality {m}: parameters do not match layer/scale layout")));
        }
        let x0 = tape.constant(g.features().clone());
        let mut current = x0;
        for k in 0..cfg.n_layers {
            let mut per_scale = Vec::with_capacity(cfg.scales.len());
            for (s, basis) in bases[m].iter().enumerate() {
                per_scale.push(agw_forward(
                    tape,
                    current,
                    x0,
                    basis,
                    h.theta[k][s],
                    h.w[k][s],
                    h.v[k],
                    cfg.activation,
                    cfg.dropout_rate,
                    training,
                    rng,
                )?);
            }
            current = magw_forward(tape, &per_scale)?;
        }
        embeddings.push(current);
    }

    let final_h = if cfg.mode.is_multimodal() {
        let n_mod = graphs.len();
        let mut maps = vec![Vec::new(); n_mod];
        for (m, list) in maps.iter_mut().enumerate() {
            for e in (0..n_mod).filter(|&e| e != m) {
                let p_me = if m < e {
                    pair_handle(&pairs, m, e)?
                } else {
                    let stored = pair_handle(&pairs, e, m)?;
                    tape.transpose(stored)
                };
                let theta_e = mh[e]
                    .cross_theta
                    .ok_or_else(|| Error::Config(format!("modality {e} lacks a cross-modality filter")))?;
                let basis_e = &bases[e][cfg.cross_scale_index];
                list.push(cross_modal_map(tape, embeddings[m], basis_e, theta_e, p_me)?);
            }
        }
        let w_cross = mh
            .iter()
            .enumerate()
            .map(|(m, h)| {
                h.cross_w
                    .ok_or_else(|| Error::Config(format!("modality {m} lacks a cross-modality kernel")))
            })
            .collect::<Result<Vec<_>>>()?;
        cross_modal_layer(tape, &embeddings, &maps, &w_cross, cfg.activation)?
    } else {
        embeddings
    };

    let mut z = Vec::with_capacity(final_h.len());
    for (m, h) in final_h.into_iter().enumerate() {
        z.push(classify(tape, h, mh[m].classifier)?);
    }
    Ok(Forward {
        z,
        params: handles,
        kinds,
        pairs,
    })
}

fn pair_handle(pairs: &[(usize, usize, Tensor)], m: usize, e: usize) -> Result<Tensor> {
    pairs
        .iter()
        .find(|(a, b, _)| *a == m && *b == e)
        .map(|(_, _, t)| *t)
        .ok_or_else(|| Error::Config(format!("no correspondence stored for modalities ({m}, {e})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn basis_identity(n: usize) -> WaveletBasis {
        WaveletBasis::identity(n, &WaveletSettings::default())
    }

    #[test]
    fn agw_identity_composition() {
        let basis = basis_identity(3);
        let mut tape = Tape::new();
        let h0 = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0]]);
        let h = tape.constant(h0.clone());
        let x0 = tape.constant(DenseMatrix::filled(3, 4, 9.0));
        let theta = tape.param(DenseMatrix::filled(3, 1, 1.0));
        let w = tape.param(DenseMatrix::identity(2));
        let v = tape.param(DenseMatrix::zeros(4, 2));
        let mut rng = stream(0, "t");
        let out = agw_forward(&mut tape, h, x0, &basis, theta, w, v, Activation::Identity, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn agw_residual_only() {
        let basis = basis_identity(2);
        let mut tape = Tape::new();
        let x = DenseMatrix::from_rows(&[[1.0, -2.0], [-0.5, 3.0]]);
        let h = tape.constant(DenseMatrix::filled(2, 2, 4.0));
        let x0 = tape.constant(x.clone());
        let theta = tape.param(DenseMatrix::filled(2, 1, 1.0));
        let w = tape.param(DenseMatrix::zeros(2, 2));
        let v = tape.param(DenseMatrix::identity(2));
        let mut rng = stream(0, "t");
        let out = agw_forward(&mut tape, h, x0, &basis, theta, w, v, Activation::Relu, 0.0, false, &mut rng).unwrap();
        assert_eq!(tape.value(out), &x.map(|a| a.max(0.0)));
    }

    #[test]
    fn magw_cases() {
        let mut tape = Tape::new();
        let a0 = DenseMatrix::from_rows(&[[1.0, -3.0]]);
        let a = tape.constant(a0.clone());
        assert_eq!(magw_forward(&mut tape, &[a]).unwrap(), a);
        let b = tape.constant(a0.clone());
        let same = magw_forward(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(same), &a0);
        let neg = tape.constant(a0.scaled(-1.0));
        let zero = magw_forward(&mut tape, &[a, neg]).unwrap();
        assert_eq!(tape.value(zero), &DenseMatrix::zeros(1, 2));
        assert!(matches!(magw_forward(&mut tape, &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn cross_map_identity_and_swap() {
        let basis = basis_identity(3);
        let h0 = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        for p0 in [
            DenseMatrix::identity(3),
            DenseMatrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        ] {
            let mut tape = Tape::new();
            let h = tape.constant(h0.clone());
            let theta = tape.param(DenseMatrix::filled(3, 1, 1.0));
            let p = tape.constant(p0);
            let out = cross_modal_map(&mut tape, h, &basis, theta, p).unwrap();
            assert_eq!(tape.value(out), &h0);
        }
    }

    #[test]
    fn cross_layer_block_selection() {
        let mut tape = Tape::new();
        let h0 = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 4.0]]);
        let h = tape.constant(h0.clone());
        let zero = tape.constant(DenseMatrix::zeros(2, 2));
        // W = [I; 0]: only the H_m block contributes.
        let w = tape.param(DenseMatrix::from_rows(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 0.0],
            [0.0, 0.0],
        ]));
        let out = cross_modal_layer(&mut tape, &[h, h], &[vec![zero], vec![zero]], &[w, w], Activation::Relu).unwrap();
        assert_eq!(tape.value(out[0]), &h0.map(|x| x.max(0.0)));
    }

    #[test]
    fn classify_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(DenseMatrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]));
        let w = tape.param(DenseMatrix::zeros(2, 4));
        let z = classify(&mut tape, h, w).unwrap();
        assert!(tape.value(z).as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let h = tape.constant(DenseMatrix::from_rows(&[[10.0, -10.0]]));
        let w = tape.param(DenseMatrix::identity(2));
        let z = classify(&mut tape, h, w).unwrap();
        assert!((tape.value(z).get(0, 0) - 1.0).abs() < 1e-4);
        assert!(tape.value(z).get(0, 1) < 1e-4);
    }

    #[test]
    fn gcn_normalization() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let a_hat = gcn_normalized_adjacency(&a).unwrap();
        assert_eq!(a_hat.to_dense(), DenseMatrix::filled(2, 2, 0.5));
        let single = gcn_normalized_adjacency(&SparseMatrix::zeros(1, 1)).unwrap();
        assert_eq!(single.to_dense(), DenseMatrix::identity(1));
    }

    #[test]
    fn gcn_identity_weight() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let a_hat = gcn_normalized_adjacency(&a).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(DenseMatrix::from_rows(&[[2.0], [4.0]]));
        let w = tape.param(DenseMatrix::identity(1));
        let out = gcn_layer(&mut tape, &a_hat, h, w, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), &DenseMatrix::filled(2, 1, 3.0));
    }

    #[test]
    fn config_contract() {
        let cfg = ModelConfig {
            mode: Mode::MGwcn,
            n_modalities: 1,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("GWCN")));
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            hidden_dims: vec![16],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("mv-gwcn".parse::<Mode>().unwrap(), Mode::MvGwcn);
        assert_eq!("M-GWCN".parse::<Mode>().unwrap(), Mode::MGwcn);
    }

    #[test]
    fn slot_views_agree() {
        let cfg = ModelConfig {
            mode: Mode::MGwcn,
            n_modalities: 2,
            ..ModelConfig::default()
        };
        let mut rng = stream(1, "init");
        let mut p = ModelParams::init(&cfg, &[(5, 3), (4, 2)], &mut rng).unwrap();
        let a: Vec<_> = p.slots().iter().map(|(k, m)| (*k, m.shape())).collect();
        let b: Vec<_> = p.slots_mut().iter().map(|(k, m)| (*k, m.shape())).collect();
        assert_eq!(a, b);
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.pairs[0].p.shape(), (5, 4));
        assert!(p.pairs[0].p.as_slice().iter().all(|&x| x > 0.0));
        p.check_shapes(&cfg, &[(5, 3), (4, 2)]).unwrap();
        assert!(p.check_shapes(&cfg, &[(5, 3), (4, 3)]).is_err());
    }
}
