//! Alternating SGD over network weights and relaxed correspondences,
//! with early stopping on validation loss.

use std::time::{Duration, Instant};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{MaskKind, ModalityGraph};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::model::{forward_full, Mode, ModelConfig, ModelParams, ParamKind};
use crate::objective::{dsm_loss, edge_incidence, masked_cross_entropy, total_objective, LossWeights};
use crate::rng::{stream, StreamRng};
use crate::wavelet::WaveletBasis;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size for the correspondence pass; `learning_rate` when unset.
    pub p_learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            p_learning_rate: None,
            max_epochs: 200,
            patience: 50,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if let Some(eta) = self.p_learning_rate {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::Config(format!("p_learning_rate must be finite and nonnegative, got {eta}")));
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.loss_weights.validate()
    }

    pub fn p_learning_rate(&self) -> f64 {
        self.p_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean over modalities.
    pub val_acc: f64,
    /// Doubly-stochastic penalty of the correspondences after this epoch.
    pub dsm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub initial_dsm: f64,
    /// Per-modality test accuracy of the restored best parameters.
    pub test_acc_best: Vec<f64>,
    /// Per-modality test accuracy of the last-epoch parameters.
    pub test_acc_final: Vec<f64>,
    pub stopped_early: bool,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.records.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Graphs, their bases, and derived operators shared by every pass.
pub struct Problem<'g> {
    pub graphs: &'g [ModalityGraph],
    pub bases: &'g [Vec<WaveletBasis>],
    pub incidences: Vec<SparseMatrix>,
}

impl<'g> Problem<'g> {
    pub fn new(graphs: &'g [ModalityGraph], bases: &'g [Vec<WaveletBasis>]) -> Result<Self> {
        let incidences = graphs
            .iter()
            .map(|g| edge_incidence(g.adjacency()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graphs,
            bases,
            incidences,
        })
    }
}

/// Gradients aligned with [`ModelParams::slots`]; untrainable slots hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<DenseMatrix>);

/// Objective value and its gradient with respect to every parameter slot.
pub fn objective_and_gradients(
    problem: &Problem<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    training: bool,
    rng: &mut StreamRng,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let fwd = forward_full(&mut tape, problem.graphs, problem.bases, params, cfg, training, rng)?;
    let terms = total_objective(&mut tape, &fwd, problem.graphs, &problem.incidences, weights)?;
    tape.backward(terms.total)?;
    let grads = fwd.params.iter().map(|&t| tape.grad_or_zeros(t)).collect();
    Ok((tape.scalar(terms.total), Gradients(grads)))
}

/// Objective value in evaluation mode (no dropout).
pub fn objective_value(
    problem: &Problem<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = stream(0, "eval");
    let fwd = forward_full(&mut tape, problem.graphs, problem.bases, params, cfg, false, &mut rng)?;
    let terms = total_objective(&mut tape, &fwd, problem.graphs, &problem.incidences, weights)?;
    Ok(tape.scalar(terms.total))
}

/// Evaluation-mode class distributions per modality.
pub fn predict(problem: &Problem<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<DenseMatrix>> {
    let mut tape = Tape::new();
    let mut rng = stream(0, "eval");
    let fwd = forward_full(&mut tape, problem.graphs, problem.bases, params, cfg, false, &mut rng)?;
    Ok(fwd.z.iter().map(|&z| tape.value(z).clone()).collect())
}

fn check_grads(params: &ModelParams, grads: &Gradients) -> Result<()> {
    let slots = params.slots();
    if slots.len() != grads.0.len() || slots.iter().zip(&grads.0).any(|((_, p), g)| p.shape() != g.shape()) {
        return Err(Error::shape("sgd_step", "gradients do not match parameter layout".to_string()));
    }
    Ok(())
}

/// `W ← W − η ∇W` for every W, V and θ; correspondences untouched.
pub fn sgd_step_weights(params: &mut ModelParams, grads: &Gradients, eta: f64) -> Result<()> {
    check_grads(params, grads)?;
    for ((kind, p), g) in params.slots_mut().into_iter().zip(&grads.0) {
        if kind != ParamKind::Permutation {
            p.axpy(-eta, g)?;
        }
    }
    Ok(())
}

/// `P̃ ← max(P̃ − η ∇P̃, 0)`; other parameters untouched.
pub fn sgd_step_permutations(params: &mut ModelParams, grads: &Gradients, eta: f64, mode: Mode) -> Result<()> {
    if mode != Mode::MGwcn {
        return Err(Error::Mode {
            mode: mode.to_string(),
            detail: "correspondences are only learned in M-GWCN mode".into(),
        });
    }
    check_grads(params, grads)?;
    for ((kind, p), g) in params.slots_mut().into_iter().zip(&grads.0) {
        if kind == ParamKind::Permutation {
            p.axpy(-eta, g)?;
            p.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
    Ok(())
}

/// Fraction of masked nodes whose argmax (lowest index on ties) matches the label.
pub fn evaluate(z_all: &[DenseMatrix], graphs: &[ModalityGraph], kind: MaskKind) -> Result<Vec<f64>> {
    if z_all.len() != graphs.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} outputs for {} graphs", z_all.len(), graphs.len()),
        ));
    }
    z_all
        .iter()
        .zip(graphs)
        .enumerate()
        .map(|(m, (z, g))| {
            let idx = g.mask_indices(kind);
            if idx.is_empty() {
                return Err(Error::Parameter(format!("modality {m}: {kind:?} mask is empty")));
            }
            let correct = idx
                .iter()
                .filter(|&&i| g.labels()[i] == Some(z.argmax_row(i)))
                .count();
            Ok(correct as f64 / idx.len() as f64)
        })
        .collect()
}

/// Tracks the best validation loss and how long it has not improved.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, initial: f64) -> Self {
        Self {
            patience,
            best: initial,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch; returns `true` when it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Snapshot {
    val_loss: f64,
    val_acc: f64,
    dsm: f64,
}

fn snapshot(problem: &Problem<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<Snapshot> {
    let mut tape = Tape::new();
    let mut rng = stream(0, "eval");
    let fwd = forward_full(&mut tape, problem.graphs, problem.bases, params, cfg, false, &mut rng)?;
    let val = masked_cross_entropy(&mut tape, &fwd.z, problem.graphs, MaskKind::Val)?;
    let p_all: Vec<_> = fwd.pairs.iter().map(|(_, _, p)| *p).collect();
    let dsm = dsm_loss(&mut tape, &p_all)?;
    let z: Vec<DenseMatrix> = fwd.z.iter().map(|&t| tape.value(t).clone()).collect();
    Ok(Snapshot {
        val_loss: tape.scalar(val),
        val_acc: mean(&evaluate(&z, problem.graphs, MaskKind::Val)?),
        dsm: tape.scalar(dsm),
    })
}

fn as_divergence(epoch: usize, err: Error) -> Error {
    match err {
        Error::Domain { op, detail } => Error::Divergence {
            epoch,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Runs the optimization loop from `params`, calling `on_epoch` after each
/// epoch. Returns the best-validation parameters.
pub fn train_with(
    problem: &Problem<'_>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    tcfg.validate()?;
    let dims = crate::model::modality_dims(problem.graphs);
    params.check_shapes(cfg, &dims)?;
    let start = Instant::now();
    let mut dropout_rng = stream(tcfg.seed, "dropout");

    let initial = snapshot(problem, &params, cfg).map_err(|e| as_divergence(0, e))?;
    let mut stopper = EarlyStopping::new(tcfg.patience, f64::INFINITY);
    let mut best_params = params.clone();
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=tcfg.max_epochs {
        let (train_loss, grads) =
            objective_and_gradients(problem, &params, cfg, &tcfg.loss_weights, true, &mut dropout_rng)
                .map_err(|e| as_divergence(epoch, e))?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("training loss is {train_loss}"),
            });
        }
        sgd_step_weights(&mut params, &grads, tcfg.learning_rate)?;

        if cfg.mode == Mode::MGwcn {
            let (_, grads) =
                objective_and_gradients(problem, &params, cfg, &tcfg.loss_weights, true, &mut dropout_rng)
                    .map_err(|e| as_divergence(epoch, e))?;
            sgd_step_permutations(&mut params, &grads, tcfg.p_learning_rate(), cfg.mode)?;
            if params.pairs.iter().any(|p| p.p.as_slice().iter().any(|&x| x < 0.0)) {
                return Err(Error::Data(format!("epoch {epoch}: negative correspondence entry after clamp")));
            }
        }
        if params.slots().iter().any(|(_, p)| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: "parameters became non-finite".into(),
            });
        }

        let snap = snapshot(problem, &params, cfg).map_err(|e| as_divergence(epoch, e))?;
        if !snap.val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss is {}", snap.val_loss),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: snap.val_loss,
            val_acc: snap.val_acc,
            dsm: snap.dsm,
        };
        on_epoch(&record);
        records.push(record);
        if stopper.observe(epoch, snap.val_loss) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < tcfg.max_epochs;
            break;
        }
    }

    let test_final = test_accuracy(problem, &params, cfg)?;
    let test_best = test_accuracy(problem, &best_params, cfg)?;
    let report = TrainReport {
        records,
        best_epoch: stopper.best_epoch(),
        initial_val_loss: initial.val_loss,
        initial_dsm: initial.dsm,
        test_acc_best: test_best,
        test_acc_final: test_final,
        stopped_early,
        wall_time: start.elapsed(),
    };
    Ok((best_params, report))
}

fn test_accuracy(problem: &Problem<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let z = predict(problem, params, cfg)?;
    evaluate(&z, problem.graphs, MaskKind::Test)
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    problem: &Problem<'_>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    params: ModelParams,
) -> Result<(ModelParams, TrainReport)> {
    train_with(problem, cfg, tcfg, params, |_| {})
}
