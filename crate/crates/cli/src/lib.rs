//! Commands behind the `mgwcn` binary.

pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mgwcn_core::data::{
    fractional_split, load_bundle, load_graph_dir, save_bundle, semi_supervised_split, split_bundle_fractional,
    synth_multimodal, DatasetBundle,
};
use mgwcn_core::graph::{MaskKind, ModalityGraph, SpectralPrep};
use mgwcn_core::model::{modality_dims, Mode, ModelConfig, ModelParams, PairParams};
use mgwcn_core::rng::stream;
use mgwcn_core::trainer::{evaluate, predict, train_with, Problem, TrainReport};
use mgwcn_core::wavelet::{build_bases, dense_wavelet_oracle, WaveletBasis, ORACLE_MAX_NODES};

use config::{ConfigError, DataKind, RunConfig, SplitKind, Toggle};

/// The parameters file is unreadable or does not fit the configuration.
#[derive(Debug, thiserror::Error)]
#[error("snapshot {path}: {msg}")]
pub struct SnapshotError {
    pub path: String,
    pub msg: String,
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_SNAPSHOT: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<SnapshotError>() {
            return EXIT_SNAPSHOT;
        }
        if let Some(e) = cause.downcast_ref::<mgwcn_core::Error>() {
            return match e {
                mgwcn_core::Error::Config(_) | mgwcn_core::Error::Parameter(_) | mgwcn_core::Error::Mode { .. } => {
                    EXIT_CONFIG
                }
                mgwcn_core::Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Wavelet,
    Train,
    Eval,
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.check_inputs()?;
    match cmd {
        Command::Synth => cmd_synth(cfg, out),
        Command::Wavelet => cmd_wavelet(cfg, out),
        Command::Train => cmd_train(cfg, out).map(|_| ()),
        Command::Eval => cmd_eval(cfg, out).map(|_| ()),
    }
}

/// Graphs ready for a model, plus ground-truth correspondences among them.
pub struct Dataset {
    pub graphs: Vec<ModalityGraph>,
    pub pairs: Vec<PairParams>,
    pub n_classes: usize,
}

fn raw_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    Ok(match cfg.data_kind {
        DataKind::Synth => synth_multimodal(&cfg.synth_params())?,
        DataKind::Graph => {
            let dir = cfg.data_dir.as_deref().expect("checked");
            let g = load_graph_dir(dir).with_context(|| format!("loading graph from {}", dir.display()))?;
            DatasetBundle::new(dir.display().to_string(), vec![g], Vec::new())?
        }
        DataKind::Bundle => {
            let dir = cfg.data_dir.as_deref().expect("checked");
            load_bundle(dir).with_context(|| format!("loading bundle from {}", dir.display()))?
        }
    })
}

/// Loads, normalizes, splits and narrows the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut bundle = raw_bundle(cfg)?;
    let normalize = match cfg.row_normalize {
        Toggle::On => true,
        Toggle::Off => false,
        Toggle::Auto => cfg.data_kind == DataKind::Graph,
    };
    if normalize {
        bundle.modalities = bundle.modalities.into_iter().map(ModalityGraph::row_normalized).collect();
    }
    let split = match cfg.split {
        SplitKind::Auto if cfg.data_kind == DataKind::Graph => SplitKind::Planetoid,
        SplitKind::Auto => SplitKind::Fractional,
        other => other,
    };
    let seed = cfg.data_seed();
    let bundle = match split {
        SplitKind::Planetoid => {
            let DatasetBundle { name, modalities, correspondences } = bundle;
            let split = modalities
                .into_iter()
                .map(|g| semi_supervised_split(g, cfg.per_class, cfg.n_val, cfg.n_test, seed))
                .collect::<mgwcn_core::Result<Vec<_>>>()?;
            DatasetBundle::new(name, split, correspondences)?
        }
        _ if bundle.modalities.len() > 1 && bundle.correspondence(0, 1).is_some() => {
            split_bundle_fractional(bundle, cfg.train_frac, cfg.val_frac, seed)?
        }
        _ => {
            let DatasetBundle { name, modalities, correspondences } = bundle;
            let split = modalities
                .into_iter()
                .map(|g| fractional_split(g, cfg.train_frac, cfg.val_frac, seed))
                .collect::<mgwcn_core::Result<Vec<_>>>()?;
            DatasetBundle::new(name, split, correspondences)?
        }
    };

    let selected: Vec<usize> = if cfg.modalities.is_empty() {
        (0..bundle.modalities.len()).collect()
    } else {
        cfg.modalities.clone()
    };
    if let Some(&m) = selected.iter().find(|&&m| m >= bundle.modalities.len()) {
        return Err(ConfigError(format!("modality {m} requested, data has {}", bundle.modalities.len())).into());
    }
    let mut pairs = Vec::new();
    for (a, &m) in selected.iter().enumerate() {
        for (b, &e) in selected.iter().enumerate().skip(a + 1) {
            if let Some(c) = bundle.correspondence(m, e) {
                pairs.push(PairParams { m: a, e: b, p: c.to_matrix(bundle.modalities[e].n_nodes()) });
            }
        }
    }
    let graphs: Vec<ModalityGraph> = selected.iter().map(|&m| bundle.modalities[m].clone()).collect();
    let n_classes = graphs.iter().map(ModalityGraph::n_classes).max().unwrap_or(0);
    Ok(Dataset { graphs, pairs, n_classes })
}

pub fn build_all_bases(graphs: &[ModalityGraph], mcfg: &ModelConfig) -> Result<Vec<Vec<WaveletBasis>>> {
    graphs
        .iter()
        .enumerate()
        .map(|(m, g)| {
            let prep = SpectralPrep::from_adjacency(g.adjacency())?;
            build_bases(&prep, &mcfg.scales, &mcfg.wavelet).with_context(|| format!("wavelet bases for modality {m}"))
        })
        .collect()
}

fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let bundle = synth_multimodal(&cfg.synth_params())?;
    save_bundle(&cfg.out_dir, &bundle)?;
    writeln!(
        out,
        "wrote {} modalities of {} nodes to {}",
        bundle.modalities.len(),
        cfg.synth_nodes,
        cfg.out_dir.display()
    )?;
    Ok(())
}

fn cmd_wavelet(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let settings = cfg.wavelet_settings();
    writeln!(out, "modality scale Q t nnz density oracle_err")?;
    for (m, g) in ds.graphs.iter().enumerate() {
        let prep = SpectralPrep::from_adjacency(g.adjacency())?;
        let bases = build_bases(&prep, &cfg.scales, &settings)?;
        for b in &bases {
            let err = if g.n_nodes() <= ORACLE_MAX_NODES {
                let exact = dense_wavelet_oracle(&prep.laplacian, b.scale)?;
                format!("{:e}", b.psi.to_dense().max_abs_diff(&exact))
            } else {
                "-".to_string()
            };
            writeln!(
                out,
                "{m} {} {} {:e} {} {} {err}",
                b.scale,
                b.cheby_order,
                b.threshold,
                b.psi.nnz(),
                b.psi.density()
            )?;
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracy_lines(acc: &[f64]) -> String {
    let mut s = format!("test_acc = {}\n", mean(acc));
    for (m, a) in acc.iter().enumerate() {
        s.push_str(&format!("test_acc_{m} = {a}\n"));
    }
    s
}

fn summary_text(mcfg: &ModelConfig, report: &TrainReport) -> String {
    let best = report.best_record();
    let mut s = String::new();
    s.push_str(&format!("mode = {}\n", mcfg.mode));
    s.push_str(&format!("modalities = {}\n", mcfg.n_modalities));
    s.push_str(&format!("epochs = {}\n", report.records.len()));
    s.push_str(&format!("best_epoch = {}\n", report.best_epoch));
    s.push_str(&format!("stopped_early = {}\n", report.stopped_early));
    s.push_str(&format!("initial_val_loss = {}\n", report.initial_val_loss));
    if let Some(b) = best {
        s.push_str(&format!("best_val_loss = {}\n", b.val_loss));
        s.push_str(&format!("best_val_acc = {}\n", b.val_acc));
    }
    if mcfg.mode.is_multimodal() {
        s.push_str(&format!("initial_dsm = {}\n", report.initial_dsm));
        if let Some(b) = best {
            s.push_str(&format!("best_dsm = {}\n", b.dsm));
        }
    }
    s.push_str(&accuracy_lines(&report.test_acc_best));
    s.push_str(&format!("test_acc_final = {}\n", mean(&report.test_acc_final)));
    s.push_str(&format!("wall_time_s = {:.3}\n", report.wall_time.as_secs_f64()));
    s
}

/// Model settings for the loaded data, validated.
fn model_for(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig> {
    let mcfg = cfg.model_config(ds.graphs.len(), ds.n_classes);
    mcfg.validate()?;
    Ok(mcfg)
}

/// Trains, writes `metrics.txt`, `summary.txt` and `params.json` to the
/// output directory, and returns the report.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainReport> {
    let ds = load_dataset(cfg)?;
    let mcfg = model_for(cfg, &ds)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;

    let bases = build_all_bases(&ds.graphs, &mcfg)?;
    let problem = Problem::new(&ds.graphs, &bases)?;
    let mut params = ModelParams::init(&mcfg, &modality_dims(&ds.graphs), &mut stream(cfg.seed, "init"))?;
    if mcfg.mode == Mode::MvGwcn {
        if ds.pairs.len() != ds.graphs.len() * (ds.graphs.len() - 1) / 2 {
            return Err(ConfigError("MV-GWCN needs ground-truth correspondences for every modality pair".into()).into());
        }
        params = params.with_fixed_correspondences(ds.pairs.clone())?;
    }

    let metrics_path = cfg.out_dir.join("metrics.txt");
    let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    let mut write_err = None;
    let (best, report) = train_with(&problem, &mcfg, &tcfg, params, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(
                metrics,
                "epoch={} train_loss={} val_loss={} val_acc={}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            ) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    metrics.flush()?;

    let params_path = cfg.params_path();
    let json = serde_json::to_string(&best)?;
    fs::write(&params_path, json).with_context(|| format!("writing {}", params_path.display()))?;
    let summary = summary_text(&mcfg, &report);
    fs::write(cfg.out_dir.join("summary.txt"), &summary)?;
    out.write_all(summary.as_bytes())?;
    Ok(report)
}

fn read_snapshot(path: &Path) -> Result<ModelParams> {
    let fail = |msg: String| SnapshotError { path: path.display().to_string(), msg };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    Ok(serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?)
}

/// Per-modality test accuracy of a saved snapshot. Reads only.
pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<f64>> {
    let path = cfg.params_path();
    let params = read_snapshot(&path)?;
    let ds = load_dataset(cfg)?;
    let mcfg = model_for(cfg, &ds)?;
    params
        .check_shapes(&mcfg, &modality_dims(&ds.graphs))
        .map_err(|e| SnapshotError { path: path.display().to_string(), msg: e.to_string() })?;
    let bases = build_all_bases(&ds.graphs, &mcfg)?;
    let problem = Problem::new(&ds.graphs, &bases)?;
    let z = predict(&problem, &params, &mcfg)?;
    let acc = evaluate(&z, &ds.graphs, MaskKind::Test)?;
    out.write_all(accuracy_lines(&acc).as_bytes())?;
    Ok(acc)
}
