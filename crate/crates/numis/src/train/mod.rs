//! Losses, optimizer, training loop, checkpoints, and evaluation metrics.
//!
//! Both model families train through the same loop via the [`Task`] trait:
//! the Vision Transformer as a multi-label sigmoid/BCE task, the CNN as a
//! per-concept two-class cross-entropy task.

mod checkpoint;
mod losses;
mod metrics;
mod optim;

pub use checkpoint::{
    CheckpointError, CheckpointStats, ConceptStats, ModelCheckpoint, MAGIC, VERSION,
};
pub use losses::{bce_loss, cross_entropy, BceLoss, PROB_CLAMP};
pub use metrics::{csv_rows, evaluate_predictions, ConceptEval, ConfusionMatrix, CSV_HEADER};
pub use optim::{zero_grads, SgdMomentum};

use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel};
use crate::tensor::{self, Tensor, TensorError};
use crate::vit::{ViTModel, VitError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid loss configuration: {0}")]
    BadLossConfig(String),
    #[error("class index {0} out of range for {1} logits")]
    BadClass(usize, usize),
    #[error("no gradient for unfrozen parameter {0}")]
    MissingGrad(String),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("cannot evaluate an empty sample set")]
    EmptyEval,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One training or evaluation sample: an image with per-concept 0/1 labels.
#[derive(Clone)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: Vec<f32>,
}

/// A trainable classification task over [`Sample`]s.
pub trait Task {
    fn parameters(&self) -> Vec<(String, Tensor)>;
    fn concepts(&self) -> &[String];
    /// Scalar loss with gradients attached.
    fn loss(&self, sample: &Sample) -> Result<Tensor, TrainError>;
    /// Per-concept positive/negative decisions.
    fn predict(&self, sample: &Sample) -> Result<Vec<bool>, TrainError>;
}

/// Multi-label ViT task: sigmoid probabilities, weighted BCE, fixed threshold.
pub struct VitTask<'a> {
    pub model: &'a ViTModel,
    pub loss: BceLoss,
    pub concepts: Vec<String>,
    pub threshold: f32,
}

impl Task for VitTask<'_> {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.model.parameters()
    }

    fn concepts(&self) -> &[String] {
        &self.concepts
    }

    fn loss(&self, sample: &Sample) -> Result<Tensor, TrainError> {
        let p = tensor::sigmoid(&self.model.forward(&sample.image)?);
        self.loss.loss(&p, &sample.labels)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<bool>, TrainError> {
        let p = tensor::sigmoid(&self.model.forward(&sample.image)?).to_vec();
        Ok(p.iter().map(|&v| v >= self.threshold).collect())
    }
}

/// Single-concept CNN task: two logits, cross-entropy, argmax decision.
/// `sample.labels[0]` is the class.
pub struct CnnTask<'a> {
    pub model: &'a CnnModel,
    pub concepts: Vec<String>,
}

impl<'a> CnnTask<'a> {
    pub fn new(model: &'a CnnModel, concept: &str) -> CnnTask<'a> {
        CnnTask { model, concepts: vec![concept.to_string()] }
    }
}

impl Task for CnnTask<'_> {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        self.model.parameters()
    }

    fn concepts(&self) -> &[String] {
        &self.concepts
    }

    fn loss(&self, sample: &Sample) -> Result<Tensor, TrainError> {
        let logits = self.model.forward(&sample.image)?;
        let class = usize::from(sample.labels[0] >= 0.5);
        cross_entropy(&logits, class)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<bool>, TrainError> {
        let l = self.model.forward(&sample.image)?;
        let d = l.data();
        Ok(vec![d[1] > d[0]])
    }
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping patience in epochs; `None` trains to `max_epochs`.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr: 1e-2, momentum: 0.9, batch_size: 8, max_epochs: 100, patience: None, seed: 0 }
    }
}

/// Stops when validation loss has not strictly improved for `patience` epochs.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: f64::INFINITY, since_best: 0 }
    }

    /// Feeds one validation loss; returns true when training should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_evals: Vec<ConceptEval>,
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the lowest validation loss; the model is left
    /// restored to this epoch's parameters.
    pub best_epoch: usize,
    pub checkpoint_paths: Vec<PathBuf>,
    /// Per-epoch statistics log (header + one row per split/concept).
    pub log_csv: String,
}

/// Mean loss and per-concept statistics over a sample set.
pub fn evaluate_task(task: &dyn Task, data: &[Sample]) -> Result<(f32, Vec<ConceptEval>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let mut total = 0.0f64;
    let mut preds = Vec::with_capacity(data.len());
    let mut acts = Vec::with_capacity(data.len());
    for s in data {
        total += task.loss(s)?.item() as f64;
        preds.push(task.predict(s)?);
        acts.push(s.labels.iter().map(|&l| l >= 0.5).collect());
    }
    let loss = (total / data.len() as f64) as f32;
    Ok((loss, evaluate_predictions(task.concepts(), &preds, &acts)))
}

/// Epoch loop: seeded shuffle, SGD-momentum batches, validation monitoring,
/// per-epoch checkpoints, optional early stopping. On return the task's
/// parameters hold the best (lowest validation loss) epoch.
pub fn run_training(
    task: &dyn Task,
    train: &[Sample],
    val: &[Sample],
    schedule: &Schedule,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let params = task.parameters();
    let mut opt = SgdMomentum::new(schedule.lr, schedule.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut stopper = schedule.patience.map(EarlyStopper::new);
    let batch = schedule.batch_size.max(1);

    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut log = String::from(CSV_HEADER);
    log.push('\n');
    let mut best: Option<(usize, f32, Vec<(String, Vec<f32>)>)> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..schedule.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        for (b, chunk) in order.chunks(batch).enumerate() {
            zero_grads(&params);
            let inv = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let loss = task.loss(&train[i])?;
                let v = loss.item();
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: b });
                }
                epoch_total += v as f64;
                tensor::scale(&loss, inv).backward()?;
            }
            opt.step(&params)?;
        }
        let train_loss = (epoch_total / train.len() as f64) as f32;

        let (val_loss, val_evals) = if val.is_empty() {
            (train_loss, Vec::new())
        } else {
            evaluate_task(task, val)?
        };
        log.push_str(&csv_rows(epoch, "train", train_loss, &[]));
        log.push_str(&csv_rows(epoch, "val", val_loss, &val_evals));

        if let Some(dir) = ckpt_dir {
            let stats = CheckpointStats {
                epoch,
                train_loss,
                val_loss,
                concepts: val_evals
                    .iter()
                    .map(|e| ConceptStats {
                        concept: e.concept.clone(),
                        f1: e.confusion.f1(),
                        confusion: e.confusion,
                    })
                    .collect(),
            };
            let path = dir.join(format!("epoch-{:04}.ckpt", epoch));
            ModelCheckpoint::capture(stats, &params).save(&path)?;
            checkpoint_paths.push(path);
        }

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if improved {
            let snap = params.iter().map(|(n, t)| (n.clone(), t.to_vec())).collect();
            best = Some((epoch, val_loss, snap));
        }
        epochs.push(EpochStats { epoch, train_loss, val_loss, val_evals });

        if let Some(s) = stopper.as_mut() {
            if s.observe(val_loss as f64) {
                break;
            }
        }
    }

    let (best_epoch, _, snap) = best.expect("at least one epoch ran");
    for ((_, t), (_, v)) in params.iter().zip(&snap) {
        t.set_data(v.clone());
    }
    Ok(TrainOutcome { epochs, best_epoch, checkpoint_paths, log_csv: log })
}
