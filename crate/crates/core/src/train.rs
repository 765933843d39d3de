//! The training loop: sample a minibatch, project, forward, backward, update,
//! and record per-epoch metrics and mask snapshots.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batches, epoch_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, MlpModel};
use crate::nm::SparsityPattern;
use crate::optim::{LrSchedule, OptimState, SgdConfig, Variant, DEFAULT_LAMBDA_W};
use crate::sad::{sad, MaskSnapshot, SadRecord};
use crate::tensor::{argmax_rows, softmax_cross_entropy, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotCadence {
    Epoch,
    Iterations(u64),
}

impl fmt::Display for SnapshotCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotCadence::Epoch => f.write_str("epoch"),
            SnapshotCadence::Iterations(k) => write!(f, "iter:{k}"),
        }
    }
}

impl FromStr for SnapshotCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "epoch" {
            return Ok(SnapshotCadence::Epoch);
        }
        match s.strip_prefix("iter:").map(str::parse::<u64>) {
            Some(Ok(k)) if k > 0 => Ok(SnapshotCadence::Iterations(k)),
            _ => Err(Error::Config(format!("snapshot cadence must be `epoch` or `iter:K`, got {s:?}"))),
        }
    }
}

impl Serialize for SnapshotCadence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SnapshotCadence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Blobs,
    Xor,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Mnist => "mnist",
            DataSource::Blobs => "blobs",
            DataSource::Xor => "xor",
        })
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DataSource::Mnist),
            "blobs" => Ok(DataSource::Blobs),
            "xor" => Ok(DataSource::Xor),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Applied to every layer except the classifier; `None` trains fully dense.
    pub pattern: Option<SparsityPattern>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Overrides the warmup + cosine schedule with a fixed rate.
    pub lr_constant: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub data: DataSource,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_dims: usize,
    pub snapshot: SnapshotCadence,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SrSte {
                lambda_w: DEFAULT_LAMBDA_W,
            },
            pattern: Some(SparsityPattern::new(2, 4).unwrap()),
            hidden: vec![256, 128],
            epochs: 20,
            batch_size: 128,
            lr_peak: 0.1,
            warmup_epochs: 5,
            lr_constant: None,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 1,
            data: DataSource::Mnist,
            train_limit: None,
            test_limit: None,
            synthetic_train: 2000,
            synthetic_test: 1000,
            synthetic_dims: 16,
            snapshot: SnapshotCadence::Epoch,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr_peak, self.warmup_epochs, self.epochs)
    }

    /// Learning rate at a fractional epoch.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        match self.lr_constant {
            Some(lr) => Ok(lr),
            None => self.schedule()?.lr_at(epoch),
        }
    }

    /// Full layer widths for a dataset with `input` features and `classes` outputs.
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        match self.lr_constant {
            Some(lr) if !(lr >= 0.0 && lr.is_finite()) => {
                return Err(Error::Config(format!("constant learning rate must be >= 0, got {lr}")))
            }
            Some(_) => {}
            None => {
                self.schedule()?;
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(l) = self.variant.lambda() {
            if !l.is_finite() {
                return Err(Error::Config("lambda must be finite".into()));
            }
        }
        match self.pattern {
            None if self.variant != Variant::Dense => {
                return Err(Error::Config(format!("variant {} needs a sparsity pattern", self.variant)));
            }
            Some(p) => {
                // hidden widths feed the next layer, so they must split into groups too
                for &h in &self.hidden {
                    if h % p.m() != 0 {
                        return Err(Error::Config(format!(
                            "hidden width {h} not divisible by {} (pattern {p})",
                            p.m()
                        )));
                    }
                }
            }
            None => {}
        }
        if self.data != DataSource::Mnist && (self.synthetic_train == 0 || self.synthetic_test == 0 || self.synthetic_dims < 2) {
            return Err(Error::Config("synthetic sizes must be positive and dims >= 2".into()));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub sad_total_prev_epoch: u64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,sad_total_prev_epoch";

pub fn write_metrics_csv<'a>(w: &mut impl Write, records: impl IntoIterator<Item = &'a MetricsRecord>) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.split, r.loss, r.accuracy, r.lr, r.sad_total_prev_epoch
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    /// Epoch-to-epoch SAD, one per epoch.
    pub epoch_sad: Vec<SadRecord>,
    /// SAD at the configured cadence (same as `epoch_sad` for epoch cadence).
    pub sad: Vec<SadRecord>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.metrics.iter().rev().find(|m| m.split == "test").map(|m| m.accuracy)
    }

    /// Mean epoch-to-epoch total SAD over the last quarter of epochs (at least one).
    pub fn late_sad_mean(&self) -> f64 {
        let n = self.epoch_sad.len();
        if n == 0 {
            return 0.0;
        }
        let tail = (n / 4).max(1);
        self.epoch_sad[n - tail..].iter().map(|r| r.total as f64).sum::<f64>() / tail as f64
    }
}

/// Mean loss and accuracy of `model` on `data`.
pub fn evaluate(model: &MlpModel<f32>, data: &Dataset, mode: ForwardMode) -> Result<(f64, f64)> {
    const CHUNK: usize = 1000;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = data.features.gather_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = model.predict(&x, mode)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Runs `config.epochs` epochs on `model` in place.
pub fn train(model: &mut MlpModel<f32>, train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if model.dims()[0] != train_set.dims() {
        return Err(Error::Config(format!(
            "model expects {} inputs, dataset has {}",
            model.dims()[0],
            train_set.dims()
        )));
    }
    let variant = config.variant;
    let mode = variant.forward_mode();
    let mut optim = OptimState::new(model, config.sgd());
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size) as u64;
    let mut report = TrainReport::default();

    let mut epoch_snapshot = MaskSnapshot::of_model(model, 0)?;
    let mut cadence_snapshot = epoch_snapshot.clone();
    let mut step = 0u64;
    let mut lr = 0.0;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in batches(train_set.len(), config.batch_size, epoch_seed(config.seed, epoch)) {
            // learning rate at the midpoint of this iteration
            lr = config.lr_at((step as f64 + 0.5) / steps_per_epoch as f64)?;
            let x: DenseMatrix<f32> = train_set.features.gather_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();

            let (logits, cache) = model.forward(&x, mode)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step: step as usize,
                    msg: format!("loss is {loss}"),
                });
            }
            let grads = model.backward(&cache, &grad)?;
            let dense_grads = if variant.needs_dense_gradient() {
                let (dl, dcache) = model.forward(&x, ForwardMode::Dense)?;
                let (_, dgrad) = softmax_cross_entropy(&dl, &y)?;
                Some(model.backward(&dcache, &dgrad)?)
            } else {
                None
            };
            optim
                .step(model, &grads, dense_grads.as_ref(), variant, lr)
                .map_err(|e| match e {
                    Error::Numeric { msg, .. } => Error::Numeric {
                        step: step as usize,
                        msg,
                    },
                    other => other,
                })?;

            loss_sum += loss as f64 * batch.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            step += 1;

            if let SnapshotCadence::Iterations(k) = config.snapshot {
                if step % k == 0 {
                    let snap = MaskSnapshot::of_model(model, step)?;
                    report.sad.push(sad(&cadence_snapshot, &snap)?);
                    cadence_snapshot = snap;
                }
            }
        }

        let snap = MaskSnapshot::of_model(model, step)?;
        let epoch_record = sad(&epoch_snapshot, &snap)?;
        epoch_snapshot = snap;
        let sad_total = epoch_record.total;
        if config.snapshot == SnapshotCadence::Epoch {
            report.sad.push(epoch_record.clone());
        }
        report.epoch_sad.push(epoch_record);

        let (test_loss, test_acc) = evaluate(model, test_set, mode)?;
        let n = train_set.len() as f64;
        report.metrics.push(MetricsRecord {
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            lr,
            sad_total_prev_epoch: sad_total,
        });
        report.metrics.push(MetricsRecord {
            epoch: epoch + 1,
            split: "test".into(),
            loss: test_loss,
            accuracy: test_acc,
            lr,
            sad_total_prev_epoch: sad_total,
        });
        info!(
            "{variant} epoch {}/{}: train loss {:.4}, test acc {:.4}, lr {:.5}, sad {}",
            epoch + 1,
            config.epochs,
            loss_sum / n,
            test_acc,
            lr,
            sad_total
        );
    }
    report.steps = step;
    Ok(report)
}
