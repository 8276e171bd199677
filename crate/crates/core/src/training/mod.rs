//! Mini-batch Adagrad training with exponential learning-rate decay, global
//! gradient clipping, and the late-fire protocol for the latent-concept head.

mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AnyDataset, FrameDataset, VideoDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, PredictionSet};
use crate::models::{checkpoint, Batch, Freeze, Model, ModelSpec};
use crate::rng::{child, DropoutStreams};
use crate::tensor::{Graph, Mode, Tensor};

pub use optim::{adagrad_step, bce_loss, clip_gradients, global_norm, lr_at, Grads, OptState, ADAGRAD_EPS};

/// Examples per learning-rate decay period at full scale.
pub const FULL_SCALE_DECAY_EVERY: u64 = 8_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Examples per decay period; unset means ten passes over the training set.
    #[serde(default)]
    pub decay_every_examples: Option<u64>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_keep")]
    pub dropout_keep: f64,
    /// Unset means 1024 for video-level and 256 for frame-level models.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Overrides the model spec's `lc_head.fire_after_epochs`.
    #[serde(default)]
    pub lc_fire_after_epochs: Option<usize>,
    /// Train only the latent-concept head once it fires.
    #[serde(default)]
    pub freeze_backbone_on_fire: bool,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// `k` of the validation GAP.
    #[serde(default = "default_k")]
    pub eval_k: usize,
}

fn default_lr() -> f64 {
    0.0002
}
fn default_decay() -> f64 {
    0.8
}
fn default_clip() -> f64 {
    0.8
}
fn default_keep() -> f64 {
    0.8
}
fn default_epochs() -> usize {
    20
}
fn default_k() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        if self.batch_size == Some(0) || self.decay_every_examples == Some(0) || self.eval_k == 0 {
            return bad("batch_size, decay_every_examples and eval_k must be positive");
        }
        Ok(())
    }

    pub fn decay_every(&self, dataset_size: usize) -> u64 {
        self.decay_every_examples.unwrap_or(10 * dataset_size.max(1) as u64)
    }

    pub fn batch_size_for(&self, spec: &ModelSpec) -> usize {
        self.batch_size
            .unwrap_or(if spec.pooling.is_frame_level() { 256 } else { 1024 })
    }
}

/// A dataset in the form a model consumes: pooled vectors for video-level
/// models (frame data is mean-pooled), frame matrices for pooling models.
#[derive(Clone, Debug, PartialEq)]
pub enum Prepared {
    Videos(VideoDataset),
    Frames(FrameDataset),
}

impl Prepared {
    pub fn for_model(spec: &ModelSpec, ds: &AnyDataset) -> Result<Self> {
        let prepared = match (spec.pooling.is_frame_level(), ds) {
            (true, AnyDataset::Frame(f)) => Prepared::Frames(f.clone()),
            (true, AnyDataset::Video(_)) => {
                return Err(Error::Config("frame-pooling model needs a frame-level dataset".into()))
            }
            (false, AnyDataset::Video(v)) => Prepared::Videos(v.clone()),
            (false, AnyDataset::Frame(f)) => Prepared::Videos(f.to_video()),
        };
        let (d, c) = prepared.dims();
        if !prepared.is_empty() && (d != spec.input_dim || c != spec.num_classes) {
            return Err(Error::Config(format!(
                "dataset has d={d}, C={c} but the model expects d={}, C={}",
                spec.input_dim, spec.num_classes
            )));
        }
        Ok(prepared)
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Prepared::Videos(v) => (v.dim, v.num_classes),
            Prepared::Frames(f) => (f.dim, f.num_classes),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Prepared::Videos(v) => v.len(),
            Prepared::Frames(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            Prepared::Videos(v) => v.ids(),
            Prepared::Frames(f) => f.ids(),
        }
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        match self {
            Prepared::Videos(v) => v.label_sets(),
            Prepared::Frames(f) => f.label_sets(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        match self {
            Prepared::Videos(v) => Batch::Videos(v.feature_matrix(idx)),
            Prepared::Frames(f) => Batch::Frames(idx.iter().map(|&i| f.examples[i].frames.clone()).collect()),
        }
    }

    pub fn labels(&self, idx: &[usize]) -> Tensor {
        match self {
            Prepared::Videos(v) => v.label_matrix(idx),
            Prepared::Frames(f) => f.label_matrix(idx),
        }
    }
}

/// Eval-mode predictions for every example of `data`.
pub fn predict_dataset(model: &Model, data: &Prepared) -> Result<PredictionSet> {
    let all: Vec<usize> = (0..data.len()).collect();
    let probs = model.predict(data.batch(&all).as_input())?;
    PredictionSet::from_tensor(data.ids(), &probs, data.label_sets())
}

/// Shuffled batch index lists for one epoch. A trailing batch of one example
/// joins the previous batch, since batch norm needs two rows.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut child(seed, "shuffle", epoch));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Owns the model, optimizer state and training data between epochs.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub state: OptState,
    data: Prepared,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(spec: ModelSpec, train: &AnyDataset, cfg: TrainConfig) -> Result<Self> {
        let data = Prepared::for_model(&spec, train)?;
        Self::from_model(Model::new(spec, cfg.seed)?, data, cfg)
    }

    pub fn from_model(model: Model, data: Prepared, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.len() < 2 {
            return Err(Error::Data(format!(
                "training needs at least 2 examples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            model,
            cfg,
            state: OptState::default(),
            data,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Epochs trained before the latent-concept head fires, if the model has one.
    pub fn fire_after(&self) -> Option<usize> {
        let lc = self.model.spec.lc_head.as_ref()?;
        Some(self.cfg.lc_fire_after_epochs.unwrap_or(lc.fire_after_epochs))
    }

    /// The head is due before the next epoch.
    pub fn lc_due(&self) -> bool {
        !self.model.has_lc() && self.fire_after().is_some_and(|f| self.epochs_done >= f)
    }

    pub fn attach_lc(&mut self) -> Result<()> {
        self.model.attach_lc()?;
        info!("latent-concept head attached after epoch {}", self.epochs_done);
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.state.examples_seen, self.data.len())
    }

    pub fn out_of_steps(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One pass over the shuffled training set; returns the example-weighted
    /// mean loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epochs_done as u64 + 1;
        let batch_size = self.cfg.batch_size_for(&self.model.spec);
        let freeze = if self.cfg.freeze_backbone_on_fire && self.model.has_lc() {
            Freeze::Backbone
        } else {
            Freeze::Nothing
        };
        let mut dropout = DropoutStreams::new(self.cfg.seed, epoch);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in epoch_batches(self.data.len(), batch_size, self.cfg.seed, epoch) {
            if self.out_of_steps() {
                break;
            }
            let batch = self.data.batch(&idx);
            let mut graph = Graph::new(Mode::Train);
            let out = self.model.forward(
                &mut graph,
                batch.as_input(),
                &mut dropout,
                self.cfg.dropout_keep,
                freeze,
            )?;
            let y = graph.constant(self.data.labels(&idx));
            let loss_var = graph.bce(out.probs, y)?;
            let loss = graph.value(loss_var).values()[0];
            let step = self.state.step + 1;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {loss} at step {step} (epoch {epoch})"
                )));
            }
            graph.backward(loss_var)?;
            let mut grads = Grads::new();
            for (name, v) in &out.params {
                if let Some(g) = graph.grad(*v) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            let norm = clip_gradients(&mut grads, self.cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient norm is {norm} at step {step} (epoch {epoch})"
                )));
            }
            let lr = self.lr();
            adagrad_step(&mut self.model.params, &grads, &mut self.state, lr);
            self.state.examples_seen += idx.len() as u64;
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        self.epochs_done += 1;
        Ok(if seen == 0 { 0.0 } else { total / seen as f64 })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub gap: Option<f64>,
    pub map: Option<f64>,
    pub perr: Option<f64>,
    pub lr: f64,
}

/// What happened when the latent-concept head fired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachRecord {
    /// Epochs completed before attachment.
    pub after_epoch: usize,
    /// Validation predictions were bit-identical before and after.
    pub predictions_identical: bool,
    pub gap_before: Option<f64>,
    pub gap_after: Option<f64>,
}

pub struct TrainRun {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub attach: Option<AttachRecord>,
    pub state: OptState,
}

/// Where [`train`] writes its log and checkpoints.
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in log {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train a fresh model of `spec`. With an output directory, the log is
/// rewritten and a checkpoint saved after every epoch; the last one is also
/// written as `model.ckpt`.
pub fn train(
    spec: ModelSpec,
    train_set: &AnyDataset,
    val_set: Option<&AnyDataset>,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<TrainRun> {
    let mut trainer = Trainer::new(spec, train_set, cfg.clone())?;
    let val = val_set
        .map(|v| Prepared::for_model(&trainer.model.spec, v))
        .transpose()?
        .filter(|v| !v.is_empty());
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let validate = |model: &Model| -> Result<Option<(PredictionSet, crate::metrics::MetricReport)>> {
        match &val {
            None => Ok(None),
            Some(v) => {
                let p = predict_dataset(model, v)?;
                let r = evaluate(&p, cfg.eval_k)?;
                Ok(Some((p, r)))
            }
        }
    };
    let mut log = Vec::new();
    let mut attach = None;
    for epoch in 1..=cfg.epochs {
        if trainer.lc_due() {
            let before = validate(&trainer.model)?;
            trainer.attach_lc()?;
            let after = validate(&trainer.model)?;
            attach = Some(AttachRecord {
                after_epoch: epoch - 1,
                predictions_identical: match (&before, &after) {
                    (Some(b), Some(a)) => b.0 == a.0,
                    _ => true,
                },
                gap_before: before.map(|b| b.1.gap),
                gap_after: after.map(|a| a.1.gap),
            });
        }
        let loss = trainer.run_epoch()?;
        let report = validate(&trainer.model)?.map(|r| r.1);
        let row = EpochLog {
            epoch,
            loss,
            gap: report.as_ref().map(|r| r.gap),
            map: report.as_ref().map(|r| r.map),
            perr: report.as_ref().map(|r| r.perr),
            lr: trainer.lr(),
        };
        info!(
            "epoch {epoch}: loss {loss:.5}{}",
            row.gap.map(|g| format!(", val GAP {g:.4}")).unwrap_or_default()
        );
        log.push(row);
        if let Some(o) = out {
            write_log(&o.log_path(), &log)?;
            checkpoint::save(&trainer.model, &o.epoch_checkpoint(epoch))?;
        }
        if trainer.out_of_steps() {
            break;
        }
    }
    if let Some(o) = out {
        checkpoint::save(&trainer.model, &o.final_checkpoint())?;
    }
    Ok(TrainRun {
        model: trainer.model,
        log,
        attach,
        state: trainer.state,
    })
}
