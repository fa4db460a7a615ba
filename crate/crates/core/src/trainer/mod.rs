//! SGD training with patience-based early stopping, evaluation, grid search
//! and checkpoints.

mod checkpoint;
mod grid;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::hcl::HclModel;
use crate::nn::{self, Mode};
use crate::rng::{RngStream, StreamId};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use grid::{grid_search, CellOutcome, GridCell, GridReport, GridSpec, LR_RANGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Head weights; `None` keeps the model's defaults.
    pub lambdas: Option<Vec<f64>>,
    pub seed: u64,
    pub dataset: String,
    pub model: String,
    /// Layers carrying a head; `None` means every hidden layer.
    pub heads: Option<Vec<usize>>,
    pub val_fraction: f64,
    pub augment: Option<AugmentConfig>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_epochs: 1000,
            patience: 200,
            batch_size: 128,
            momentum: 0.9,
            lambdas: None,
            seed: 0,
            dataset: "mnist".into(),
            model: "lenet5".into(),
            heads: None,
            val_fraction: 0.1,
            augment: None,
            eval_batch_size: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        if let Some(l) = self.lambdas.iter().flatten().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda {l} is not a non-negative number"));
        }
        Ok(())
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape("sgd step", param.shape(), grad.shape()));
    }
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Mean cross-entropy of the final layer.
    pub loss: f64,
    pub per_head_accuracy: Vec<f64>,
    pub per_head_loss: Vec<f64>,
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    Ok(nn::argmax_rows(logits)?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Eval-mode pass over a whole dataset.
pub fn evaluate<T: Element>(model: &HclModel<T>, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let h = model.heads().len();
    let mut rng = RngStream::new(0, StreamId::Dropout);
    let (mut hits, mut loss) = (0usize, 0.0);
    let mut head_hits = vec![0usize; h];
    let mut head_loss = vec![0.0; h];
    for batch in data::sequential_batches::<T>(ds, batch_size)? {
        let fwd = model.forward(&batch.images, Mode::Eval, &mut rng)?;
        let b = batch.labels.len() as f64;
        hits += correct(fwd.final_logits(), &batch.labels)?;
        loss += b * nn::softmax_cross_entropy(fwd.final_logits(), &batch.labels)?.0;
        for (k, logits) in fwd.head_logits.iter().enumerate() {
            head_hits[k] += correct(logits, &batch.labels)?;
            head_loss[k] += b * nn::softmax_cross_entropy(logits, &batch.labels)?.0;
        }
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        n: ds.len(),
        accuracy: hits as f64 / n,
        loss: loss / n,
        per_head_accuracy: head_hits.iter().map(|&c| c as f64 / n).collect(),
        per_head_loss: head_loss.iter().map(|l| l / n).collect(),
    })
}

/// One epoch of training metrics plus the validation pass that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean composite loss over training samples.
    pub train_loss: f64,
    pub train_final_loss: f64,
    pub train_head_losses: Vec<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_head_accuracies: Vec<f64>,
}

impl EpochRecord {
    pub fn csv_header(num_heads: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "train_loss".into(), "train_final_loss".into()];
        cols.extend((0..num_heads).map(|k| format!("train_head{k}_loss")));
        cols.extend(["val_loss".to_string(), "val_accuracy".into()]);
        cols.extend((0..num_heads).map(|k| format!("val_head{k}_accuracy")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.train_loss.to_string(),
            self.train_final_loss.to_string(),
        ];
        cols.extend(self.train_head_losses.iter().map(f64::to_string));
        cols.extend([self.val_loss.to_string(), self.val_accuracy.to_string()]);
        cols.extend(self.val_head_accuracies.iter().map(f64::to_string));
        cols.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

/// Anything that can be trained one epoch at a time and rolled back to an
/// earlier parameter snapshot.
pub trait TrainingSession {
    type Snapshot;

    /// Trains epoch `epoch` (1-based) and validates.
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: &Self::Snapshot);
}

/// Early-stopping bookkeeping; serializable so a run can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub bad_epochs: usize,
    pub stop: Option<StopReason>,
    pub history: Vec<EpochRecord>,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            epochs_done: 0,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            bad_epochs: 0,
            stop: None,
            history: Vec::new(),
        }
    }
}

/// Runs epochs until patience or `max_epochs` stops training, or until
/// `pause_after` epochs are done (whichever is first). On a real stop the
/// best snapshot is restored into the session; a pause leaves the latest
/// parameters in place so training can continue.
pub fn run_early_stopping<S: TrainingSession>(
    session: &mut S,
    progress: &mut Progress,
    best: &mut Option<S::Snapshot>,
    max_epochs: usize,
    patience: usize,
    pause_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochRecord, &S, &Progress, &Option<S::Snapshot>) -> Result<()>,
) -> Result<Option<StopReason>> {
    while progress.stop.is_none() {
        if progress.epochs_done >= max_epochs {
            progress.stop = Some(StopReason::MaxEpochs);
            break;
        }
        if pause_after.is_some_and(|p| progress.epochs_done >= p) {
            return Ok(None);
        }
        let epoch = progress.epochs_done + 1;
        let rec = session.run_epoch(epoch)?;
        if !rec.val_loss.is_finite() || !rec.train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("loss is {} (train) / {} (val)", rec.train_loss, rec.val_loss),
            });
        }
        progress.epochs_done = epoch;
        if rec.val_loss < progress.best_val_loss {
            progress.best_val_loss = rec.val_loss;
            progress.best_epoch = epoch;
            progress.bad_epochs = 0;
            *best = Some(session.snapshot());
        } else {
            progress.bad_epochs += 1;
        }
        progress.history.push(rec);
        if progress.bad_epochs >= patience {
            progress.stop = Some(StopReason::Patience);
        } else if epoch >= max_epochs {
            progress.stop = Some(StopReason::MaxEpochs);
        }
        on_epoch(progress.history.last().unwrap(), session, progress, best)?;
    }
    if let Some(snap) = best.as_ref() {
        session.restore(snap);
    }
    Ok(progress.stop)
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Element> {
    pub model: HclModel<T>,
    pub velocity: Vec<Tensor<T>>,
    pub dropout_rng: RngStream,
    pub augment_rng: RngStream,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: HclModel<T>, seed: u64) -> Self {
        let velocity = model.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            model,
            velocity,
            dropout_rng: RngStream::new(seed, StreamId::Dropout),
            augment_rng: RngStream::new(seed, StreamId::Augment),
        }
    }
}

/// The SGD session over concrete datasets.
pub struct SgdSession<'a, T: Element> {
    pub state: &'a mut TrainState<T>,
    train: &'a Dataset,
    val: &'a Dataset,
    cfg: &'a TrainConfig,
}

impl<'a, T: Element> SgdSession<'a, T> {
    pub fn new(state: &'a mut TrainState<T>, train: &'a Dataset, val: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::arg("training and validation sets must be non-empty"));
        }
        if state.model.spec().input_shape() != train.image_shape() {
            return Err(Error::shape("model input", state.model.spec().input_shape(), train.image_shape()));
        }
        Ok(Self { state, train, val, cfg })
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64, Vec<f64>)> {
        let st = &mut *self.state;
        let h = st.model.heads().len();
        let (mut total, mut fin) = (0.0, 0.0);
        let mut heads = vec![0.0; h];
        for batch in data::batch_iter::<T>(self.train, self.cfg.batch_size, self.cfg.seed, epoch as u64)? {
            let images = match &self.cfg.augment {
                Some(aug) => data::augment(&batch.images, aug, &mut st.augment_rng)?,
                None => batch.images,
            };
            let fwd = st.model.forward(&images, Mode::Train, &mut st.dropout_rng)?;
            let grads = st.model.backward(&fwd, &batch.labels)?;
            let b = batch.labels.len() as f64;
            total += b * grads.loss.total;
            fin += b * grads.loss.final_loss;
            for (acc, l) in heads.iter_mut().zip(&grads.loss.per_head_loss) {
                *acc += b * l;
            }
            for ((p, g), v) in st.model.tensors_mut().zip(grads.tensors()).zip(st.velocity.iter_mut()) {
                sgd_step(p, g, v, self.cfg.lr, self.cfg.momentum)?;
            }
        }
        let n = self.train.len() as f64;
        Ok((total / n, fin / n, heads.iter().map(|l| l / n).collect()))
    }
}

/// Non-finite values anywhere in a step mean the run has diverged.
fn as_divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteActivation { .. } | Error::Numeric(_) => Error::Divergence {
            epoch,
            reason: e.to_string(),
        },
        other => other,
    }
}

impl<T: Element> TrainingSession for SgdSession<'_, T> {
    type Snapshot = Vec<Tensor<T>>;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let (train_loss, train_final_loss, train_head_losses) =
            self.train_epoch(epoch).map_err(|e| as_divergence(epoch, e))?;
        let val = evaluate(&self.state.model, self.val, self.cfg.eval_batch_size).map_err(|e| as_divergence(epoch, e))?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            train_final_loss,
            train_head_losses,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_head_accuracies: val.per_head_accuracy,
        })
    }

    fn snapshot(&self) -> Vec<Tensor<T>> {
        self.state.model.tensors().cloned().collect()
    }

    fn restore(&mut self, snapshot: &Vec<Tensor<T>>) {
        for (dst, src) in self.state.model.tensors_mut().zip(snapshot) {
            dst.clone_from(src);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub rows: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_time: Duration,
}

/// A training run that can be paused, checkpointed and resumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Run<T: Element> {
    pub state: TrainState<T>,
    pub progress: Progress,
    /// Parameters of the best epoch so far.
    pub best: Option<Vec<Tensor<T>>>,
}

/// Borrowed view of a [`Run`] handed to per-epoch hooks.
#[derive(Debug, Clone, Copy)]
pub struct RunView<'a, T: Element> {
    pub state: &'a TrainState<T>,
    pub progress: &'a Progress,
    pub best: Option<&'a Vec<Tensor<T>>>,
}

impl<T: Element> Run<T> {
    pub fn new(model: HclModel<T>, cfg: &TrainConfig) -> Self {
        Self {
            state: TrainState::new(model, cfg.seed),
            progress: Progress::default(),
            best: None,
        }
    }

    pub fn view(&self) -> RunView<'_, T> {
        RunView {
            state: &self.state,
            progress: &self.progress,
            best: self.best.as_ref(),
        }
    }

    /// Trains until stopped, or until `pause_after` epochs are complete.
    /// Returns the stop reason, or `None` when paused.
    pub fn advance(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        cfg: &TrainConfig,
        pause_after: Option<usize>,
        mut on_epoch: impl FnMut(&EpochRecord, RunView<'_, T>) -> Result<()>,
    ) -> Result<Option<StopReason>> {
        let mut session = SgdSession::new(&mut self.state, train, val, cfg)?;
        run_early_stopping(
            &mut session,
            &mut self.progress,
            &mut self.best,
            cfg.max_epochs,
            cfg.patience,
            pause_after,
            |rec, s, p, b| {
                on_epoch(
                    rec,
                    RunView {
                        state: s.state,
                        progress: p,
                        best: b.as_ref(),
                    },
                )
            },
        )
    }

    pub fn report(&self, wall_time: Duration) -> Option<FitReport> {
        Some(FitReport {
            rows: self.progress.history.clone(),
            best_epoch: self.progress.best_epoch,
            best_val_loss: self.progress.best_val_loss,
            stop_reason: self.progress.stop?,
            wall_time,
        })
    }
}

/// Trains to completion and returns the model with its best-epoch parameters.
pub fn fit<T: Element>(
    model: HclModel<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(HclModel<T>, FitReport)> {
    let start = Instant::now();
    let mut run = Run::new(model, cfg);
    run.advance(train, val, cfg, None, |_, _| Ok(()))?;
    let report = run.report(start.elapsed()).expect("run finished");
    Ok((run.state.model, report))
}
