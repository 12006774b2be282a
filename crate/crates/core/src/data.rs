//! Plain-text datasets, synthetic multimodal bundles and split construction.
//!
//! File grammar (all indices 0-based):
//!
//! * edges: `u v w` per line; each undirected edge once or in both
//!   directions (repeats overwrite).
//! * features: header `N d`, then `N` lines of `d` reals.
//! * labels: `node class` per line, `class = -1` for unlabeled. Nodes not
//!   listed are unlabeled.
//!
//! Blank lines and anything after `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{invert_permutation, knn_graph, ModalityGraph};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::model::PairParams;
use crate::rng::stream;

/// Ground-truth matches between modalities `m < e`: node `i` of `m` is the
/// same entity as node `map[i]` of `e`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence {
    pub m: usize,
    pub e: usize,
    pub map: Vec<usize>,
}

impl Correspondence {
    /// Hard assignment matrix `N_m × N_e`.
    pub fn to_matrix(&self, n_e: usize) -> DenseMatrix {
        let mut p = DenseMatrix::zeros(self.map.len(), n_e);
        for (i, &j) in self.map.iter().enumerate() {
            p.set(i, j, 1.0);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub modalities: Vec<ModalityGraph>,
    pub correspondences: Vec<Correspondence>,
}

impl DatasetBundle {
    pub fn new(name: impl Into<String>, modalities: Vec<ModalityGraph>, correspondences: Vec<Correspondence>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Data("bundle has no modalities".into()));
        }
        let classes = modalities[0].n_classes();
        if let Some((m, g)) = modalities.iter().enumerate().find(|(_, g)| g.n_classes() != classes) {
            return Err(Error::Data(format!(
                "modality {m} has {} classes, modality 0 has {classes}",
                g.n_classes()
            )));
        }
        for c in &correspondences {
            let (Some(gm), Some(ge)) = (modalities.get(c.m), modalities.get(c.e)) else {
                return Err(Error::Data(format!("correspondence ({}, {}) names a missing modality", c.m, c.e)));
            };
            if c.m >= c.e || c.map.len() != gm.n_nodes() || gm.n_nodes() != ge.n_nodes() {
                return Err(Error::Data(format!("correspondence ({}, {}) has the wrong size", c.m, c.e)));
            }
            invert_permutation(&c.map, ge.n_nodes())
                .map_err(|_| Error::Data(format!("correspondence ({}, {}) is not a bijection", c.m, c.e)))?;
        }
        Ok(Self {
            name: name.into(),
            modalities,
            correspondences,
        })
    }

    pub fn correspondence(&self, m: usize, e: usize) -> Option<&Correspondence> {
        self.correspondences.iter().find(|c| c.m == m && c.e == e)
    }

    /// Ground truth as fixed model correspondences, one per pair `m < e`.
    pub fn ground_truth_pairs(&self) -> Result<Vec<PairParams>> {
        let n = self.modalities.len();
        let mut out = Vec::new();
        for m in 0..n {
            for e in m + 1..n {
                let c = self
                    .correspondence(m, e)
                    .ok_or_else(|| Error::Data(format!("bundle lacks correspondence ({m}, {e})")))?;
                out.push(PairParams {
                    m,
                    e,
                    p: c.to_matrix(self.modalities[e].n_nodes()),
                });
            }
        }
        Ok(out)
    }
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            inner: text.lines().enumerate(),
        }
    }

    /// Next non-empty line with comments stripped, as (1-based number, fields).
    fn next_fields(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            let body = raw.split('#').next().unwrap_or("");
            let fields: Vec<&str> = body.split_whitespace().collect();
            if !fields.is_empty() {
                return Some((i + 1, fields));
            }
        }
        None
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

fn parse<T: std::str::FromStr>(lines: &Lines<'_>, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| lines.err(line, format!("invalid {what} `{field}`")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<DenseMatrix> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let (hl, header) = lines.next_fields().ok_or_else(|| lines.err(1, "missing `N d` header"))?;
    if header.len() != 2 {
        return Err(lines.err(hl, "header must be `N d`"));
    }
    let n: usize = parse(&lines, hl, header[0], "node count")?;
    let d: usize = parse(&lines, hl, header[1], "feature dimension")?;
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    let mut last = hl;
    while let Some((ln, fields)) = lines.next_fields() {
        last = ln;
        if rows == n {
            return Err(lines.err(ln, format!("more than the declared {n} feature rows")));
        }
        if fields.len() != d {
            return Err(lines.err(ln, format!("expected {d} values, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = parse(&lines, ln, f, "feature value")?;
            if !v.is_finite() {
                return Err(lines.err(ln, format!("non-finite feature value `{f}`")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(lines.err(last, format!("declared {n} feature rows, found {rows}")));
    }
    DenseMatrix::from_vec(n, d, data)
}

pub fn read_edges(path: &Path, n: usize) -> Result<SparseMatrix> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    while let Some((ln, fields)) = lines.next_fields() {
        if fields.len() != 3 {
            return Err(lines.err(ln, format!("expected `u v w`, found {} fields", fields.len())));
        }
        let u: usize = parse(&lines, ln, fields[0], "node index")?;
        let v: usize = parse(&lines, ln, fields[1], "node index")?;
        let w: f64 = parse(&lines, ln, fields[2], "edge weight")?;
        if u >= n || v >= n {
            return Err(lines.err(ln, format!("node index out of range for {n} nodes")));
        }
        if u == v {
            return Err(lines.err(ln, format!("self loop at node {u}")));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(lines.err(ln, format!("edge weight must be finite and nonnegative, got {w}")));
        }
        edges.insert((u.min(v), u.max(v)), w);
    }
    let mut triplets = Vec::with_capacity(2 * edges.len());
    for (&(u, v), &w) in &edges {
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

pub fn read_labels(path: &Path, n: usize) -> Result<Vec<Option<usize>>> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let mut labels = vec![None; n];
    let mut seen = vec![false; n];
    while let Some((ln, fields)) = lines.next_fields() {
        if fields.len() != 2 {
            return Err(lines.err(ln, format!("expected `node class`, found {} fields", fields.len())));
        }
        let i: usize = parse(&lines, ln, fields[0], "node index")?;
        let c: i64 = parse(&lines, ln, fields[1], "class index")?;
        if i >= n {
            return Err(lines.err(ln, format!("node index {i} out of range for {n} nodes")));
        }
        if seen[i] {
            return Err(lines.err(ln, format!("node {i} labeled twice")));
        }
        seen[i] = true;
        labels[i] = match c {
            -1 => None,
            c if c >= 0 => Some(c as usize),
            _ => return Err(lines.err(ln, format!("class index must be >= -1, got {c}"))),
        };
    }
    Ok(labels)
}

/// Loads one graph; the node count comes from the features header.
pub fn load_explicit_graph(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<ModalityGraph> {
    let features = read_features(feature_path)?;
    let n = features.rows();
    let adjacency = read_edges(edge_path, n)?;
    let labels = read_labels(label_path, n)?;
    ModalityGraph::new(adjacency, features, labels)
}

/// Loads `edges.txt`, `features.txt`, `labels.txt` from `dir`.
pub fn load_graph_dir(dir: &Path) -> Result<ModalityGraph> {
    load_explicit_graph(&dir.join("edges.txt"), &dir.join("features.txt"), &dir.join("labels.txt"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a graph in the grammar read by [`load_graph_dir`].
pub fn save_graph_dir(dir: &Path, g: &ModalityGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for (i, j, w) in g.adjacency().triplets() {
        if i < j {
            writeln!(edges, "{i} {j} {w}").unwrap();
        }
    }
    let f = g.features();
    let mut feats = format!("{} {}\n", f.rows(), f.cols());
    for i in 0..f.rows() {
        let row: Vec<String> = f.row(i).iter().map(|v| v.to_string()).collect();
        feats.push_str(&row.join(" "));
        feats.push('\n');
    }
    let mut labels = String::new();
    for (i, l) in g.labels().iter().enumerate() {
        match l {
            Some(c) => writeln!(labels, "{i} {c}").unwrap(),
            None => writeln!(labels, "{i} -1").unwrap(),
        }
    }
    write_file(&dir.join("edges.txt"), &edges)?;
    write_file(&dir.join("features.txt"), &feats)?;
    write_file(&dir.join("labels.txt"), &labels)
}

fn modality_dir(root: &Path, m: usize) -> PathBuf {
    root.join(format!("modality_{m}"))
}

fn correspondence_path(root: &Path, m: usize, e: usize) -> PathBuf {
    root.join(format!("correspondence_{m}_{e}.txt"))
}

pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, g) in bundle.modalities.iter().enumerate() {
        save_graph_dir(&modality_dir(dir, m), g)?;
    }
    for c in &bundle.correspondences {
        let mut text = String::new();
        for (i, j) in c.map.iter().enumerate() {
            writeln!(text, "{i} {j}").unwrap();
        }
        write_file(&correspondence_path(dir, c.m, c.e), &text)?;
    }
    Ok(())
}

/// Reads `modality_0/`, `modality_1/`, … and any correspondence files.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let mut modalities = Vec::new();
    while modality_dir(dir, modalities.len()).is_dir() {
        modalities.push(load_graph_dir(&modality_dir(dir, modalities.len()))?);
    }
    if modalities.is_empty() {
        return Err(Error::Data(format!("{} holds no modality_0 directory", dir.display())));
    }
    let mut correspondences = Vec::new();
    for m in 0..modalities.len() {
        for e in m + 1..modalities.len() {
            let path = correspondence_path(dir, m, e);
            if !path.exists() {
                continue;
            }
            let text = read_text(&path)?;
            let mut lines = Lines::new(&path, &text);
            let n = modalities[m].n_nodes();
            let mut map = vec![usize::MAX; n];
            while let Some((ln, fields)) = lines.next_fields() {
                if fields.len() != 2 {
                    return Err(lines.err(ln, "expected `i j`"));
                }
                let i: usize = parse(&lines, ln, fields[0], "node index")?;
                let j: usize = parse(&lines, ln, fields[1], "node index")?;
                if i >= n || j >= modalities[e].n_nodes() {
                    return Err(lines.err(ln, "node index out of range"));
                }
                map[i] = j;
            }
            if let Some(i) = map.iter().position(|&j| j == usize::MAX) {
                return Err(Error::Data(format!("{}: node {i} has no match", path.display())));
            }
            correspondences.push(Correspondence { m, e, map });
        }
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into());
    DatasetBundle::new(name, modalities, correspondences)
}

/// Masks from explicit index lists.
fn masks_from(n: usize, train: &[usize], val: &[usize], test: &[usize]) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let mk = |idx: &[usize]| {
        let mut v = vec![false; n];
        idx.iter().for_each(|&i| v[i] = true);
        v
    };
    (mk(train), mk(val), mk(test))
}

/// `per_class` training nodes per class, then `n_val` and `n_test` nodes
/// drawn uniformly from the remaining labeled nodes.
pub fn semi_supervised_split(g: ModalityGraph, per_class: usize, n_val: usize, n_test: usize, seed: u64) -> Result<ModalityGraph> {
    let mut rng = stream(seed, "split");
    let n_classes = g.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, l) in g.labels().iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(i);
        }
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for (c, nodes) in by_class.iter_mut().enumerate() {
        if nodes.len() < per_class {
            return Err(Error::Data(format!(
                "class {c} has {} labeled nodes, {per_class} requested for training",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..per_class]);
        rest.extend_from_slice(&nodes[per_class..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    if rest.len() < n_val + n_test {
        return Err(Error::Data(format!(
            "{} labeled nodes remain after training selection, {} requested for validation and test",
            rest.len(),
            n_val + n_test
        )));
    }
    let (tr, va, te) = masks_from(g.n_nodes(), &train, &rest[..n_val], &rest[n_val..n_val + n_test]);
    g.with_masks(tr, va, te)
}

fn fractional_indices(labeled: &[usize], train_frac: f64, val_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "split fractions must satisfy train > 0, val >= 0, train + val <= 1 (got {train_frac}, {val_frac})"
        )));
    }
    let mut order = labeled.to_vec();
    order.shuffle(&mut stream(seed, "split"));
    let n = order.len();
    let n_train = ((train_frac * n as f64).round() as usize).min(n);
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

/// Seeded train/val/test partition of the labeled nodes at the given
/// fractions; the remainder is test.
pub fn fractional_split(g: ModalityGraph, train_frac: f64, val_frac: f64, seed: u64) -> Result<ModalityGraph> {
    let labeled: Vec<usize> = (0..g.n_nodes()).filter(|&i| g.labels()[i].is_some()).collect();
    let (tr, va, te) = fractional_indices(&labeled, train_frac, val_frac, seed)?;
    let (a, b, c) = masks_from(g.n_nodes(), &tr, &va, &te);
    g.with_masks(a, b, c)
}

/// Fractional split by entity: modality 0 is split and the same entities
/// are selected in every other modality through the ground truth, so no
/// entity is trained on in one modality and tested in another.
pub fn split_bundle_fractional(bundle: DatasetBundle, train_frac: f64, val_frac: f64, seed: u64) -> Result<DatasetBundle> {
    let g0 = &bundle.modalities[0];
    let labeled: Vec<usize> = (0..g0.n_nodes()).filter(|&i| g0.labels()[i].is_some()).collect();
    let (tr, va, te) = fractional_indices(&labeled, train_frac, val_frac, seed)?;
    let mut maps: Vec<Vec<usize>> = vec![(0..g0.n_nodes()).collect()];
    for e in 1..bundle.modalities.len() {
        let c = bundle
            .correspondence(0, e)
            .ok_or_else(|| Error::Data(format!("entity split needs correspondence (0, {e})")))?;
        maps.push(c.map.clone());
    }
    let DatasetBundle {
        name,
        modalities,
        correspondences,
    } = bundle;
    let mut out = Vec::with_capacity(modalities.len());
    for (g, map) in modalities.into_iter().zip(&maps) {
        let pick = |idx: &[usize]| idx.iter().map(|&i| map[i]).collect::<Vec<_>>();
        let (a, b, c) = masks_from(g.n_nodes(), &pick(&tr), &pick(&va), &pick(&te));
        out.push(g.with_masks(a, b, c)?);
    }
    DatasetBundle::new(name, out, correspondences)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_nodes: usize,
    pub n_classes: usize,
    pub n_modalities: usize,
    /// Feature dimension per modality.
    pub dims: Vec<usize>,
    /// Standard deviation of per-modality feature noise.
    pub noise: f64,
    /// Neighbors per node in each modality graph.
    pub k: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_nodes: 400,
            n_classes: 4,
            n_modalities: 2,
            dims: vec![16, 16],
            noise: 1.0,
            k: 5,
            seed: 0,
        }
    }
}

/// Entities share a one-hot class latent; each modality maps it through its
/// own Gaussian linear map, adds isotropic noise, builds a kNN graph, and
/// shuffles its node order.
pub fn synth_multimodal(p: &SynthParams) -> Result<DatasetBundle> {
    let param = |msg: String| Err(Error::Parameter(msg));
    if p.n_classes == 0 {
        return param("n_classes must be at least 1".into());
    }
    if p.n_modalities == 0 {
        return param("n_modalities must be at least 1".into());
    }
    if p.k == 0 {
        return param("k must be at least 1".into());
    }
    if p.n_nodes < p.n_classes * p.k {
        return param(format!(
            "n_nodes = {} must be at least n_classes * k = {}",
            p.n_nodes,
            p.n_classes * p.k
        ));
    }
    if p.dims.len() != p.n_modalities || p.dims.contains(&0) {
        return param(format!(
            "dims must list one positive dimension per modality ({} given for {})",
            p.dims.len(),
            p.n_modalities
        ));
    }
    if !(p.noise.is_finite() && p.noise >= 0.0) {
        return param(format!("noise must be finite and nonnegative, got {}", p.noise));
    }

    let latent_dim = p.n_classes;
    let mut class_rng = stream(p.seed, "synth-classes");
    let mut classes: Vec<usize> = (0..p.n_nodes).map(|i| i % p.n_classes).collect();
    classes.shuffle(&mut class_rng);

    let mut modalities = Vec::with_capacity(p.n_modalities);
    let mut orders = Vec::with_capacity(p.n_modalities);
    for (m, &d) in p.dims.iter().enumerate() {
        let mut rng = stream(p.seed, &format!("synth-modality-{m}"));
        // Row c is the class-c center in this modality's feature space.
        let map = DenseMatrix::from_fn(latent_dim, d, |_, _| StandardNormal.sample(&mut rng));
        let mut order: Vec<usize> = (0..p.n_nodes).collect();
        order.shuffle(&mut rng);
        // Node j of this modality is entity order[j].
        let mut features = DenseMatrix::zeros(p.n_nodes, d);
        for (j, &entity) in order.iter().enumerate() {
            let c = classes[entity];
            for col in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.set(j, col, map.get(c, col) + p.noise * noise);
            }
        }
        let adjacency = knn_graph(&features, p.k)?;
        let labels = order.iter().map(|&entity| Some(classes[entity])).collect();
        modalities.push(ModalityGraph::new(adjacency, features, labels)?);
        orders.push(order);
    }

    let inverses: Vec<Vec<usize>> = orders
        .iter()
        .map(|o| invert_permutation(o, p.n_nodes))
        .collect::<Result<_>>()?;
    let mut correspondences = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for m in 0..p.n_modalities {
        for e in m + 1..p.n_modalities {
            let map = orders[m].iter().map(|&entity| inverses[e][entity]).collect();
            correspondences.push(Correspondence { m, e, map });
        }
    }
    DatasetBundle::new(format!("synth-{}", p.seed), modalities, correspondences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MaskKind;

    fn toy_graph(labels: Vec<Option<usize>>) -> ModalityGraph {
        let n = labels.len();
        ModalityGraph::new(SparseMatrix::zeros(n, n), DenseMatrix::zeros(n, 1), labels).unwrap()
    }

    #[test]
    fn semi_supervised_counts() {
        let labels = (0..30).map(|i| Some(i % 3)).collect();
        let g = semi_supervised_split(toy_graph(labels), 1, 5, 10, 4).unwrap();
        assert_eq!(g.mask_indices(MaskKind::Train).len(), 3);
        assert_eq!(g.mask_indices(MaskKind::Val).len(), 5);
        assert_eq!(g.mask_indices(MaskKind::Test).len(), 10);
        let labels: Vec<_> = (0..30).map(|i| Some(i % 3)).collect();
        let a = semi_supervised_split(toy_graph(labels.clone()), 2, 5, 5, 9).unwrap();
        let b = semi_supervised_split(toy_graph(labels.clone()), 2, 5, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(semi_supervised_split(toy_graph(labels), 11, 0, 0, 0).is_err());
    }

    #[test]
    fn fractional_counts() {
        let labels: Vec<_> = (0..100).map(|i| Some(i % 2)).collect();
        let g = fractional_split(toy_graph(labels.clone()), 0.5, 0.3, 1).unwrap();
        let counts: Vec<_> = [MaskKind::Train, MaskKind::Val, MaskKind::Test]
            .iter()
            .map(|&k| g.mask_indices(k).len())
            .collect();
        assert_eq!(counts, vec![50, 30, 20]);
        let all = fractional_split(toy_graph(labels.clone()), 1.0, 0.0, 1).unwrap();
        assert_eq!(all.mask_indices(MaskKind::Train).len(), 100);
        assert!(fractional_split(toy_graph(labels.clone()), 0.8, 0.3, 1).is_err());
        assert!(fractional_split(toy_graph(labels), 0.0, 0.3, 1).is_err());
    }

    #[test]
    fn synth_validation() {
        let bad = SynthParams {
            n_classes: 0,
            ..SynthParams::default()
        };
        assert!(matches!(synth_multimodal(&bad), Err(Error::Parameter(_))));
        let small = SynthParams {
            n_nodes: 10,
            k: 5,
            ..SynthParams::default()
        };
        assert!(synth_multimodal(&small).is_err());
    }
}
