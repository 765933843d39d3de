//! Sparse Architecture Divergence: how many mask bits flip between two points
//! of a training run.
//!
//! `SAD_{i:j} = ||E_j - E_i||_1`, computed per patterned layer and summed.
//! Two recording schemes are provided. Scheme S trains with sparse forward and
//! STE updates and records the masks it actually used. Scheme D trains the
//! dense network with plain SGD and records `mask_of(W_t)` after the fact.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batches, epoch_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, MlpModel};
use crate::nm::Mask;
use crate::optim::{OptimState, SgdConfig, Variant};
use crate::tensor::softmax_cross_entropy;

/// Masks of every patterned layer at one point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub step: u64,
    pub masks: Vec<Mask>,
}

impl MaskSnapshot {
    pub fn of_model(model: &MlpModel<f32>, step: u64) -> Result<Self> {
        Ok(Self {
            step,
            masks: model.current_masks()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SadRecord {
    pub step_i: u64,
    pub step_j: u64,
    pub per_layer: Vec<u64>,
    pub total: u64,
    /// `per_layer[l]` divided by the layer's weight count.
    pub normalized: Vec<f64>,
}

pub fn sad(a: &MaskSnapshot, b: &MaskSnapshot) -> Result<SadRecord> {
    if a.masks.len() != b.masks.len() {
        return Err(Error::Input(format!(
            "snapshots have {} and {} layers",
            a.masks.len(),
            b.masks.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(a.masks.len());
    let mut normalized = Vec::with_capacity(a.masks.len());
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        let d = ma.hamming(mb).map_err(|e| Error::Input(e.to_string()))?;
        per_layer.push(d);
        normalized.push(if ma.is_empty() { 0.0 } else { d as f64 / ma.len() as f64 });
    }
    Ok(SadRecord {
        step_i: a.step,
        step_j: b.step,
        total: per_layer.iter().sum(),
        per_layer,
        normalized,
    })
}

/// One JSON object per line.
pub fn write_jsonl<'a>(w: &mut impl Write, records: impl IntoIterator<Item = &'a SadRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<SadRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Sparse forward, STE update.
    S,
    /// Dense forward, plain SGD update.
    D,
}

impl Scheme {
    fn variant(self) -> Variant {
        match self {
            Scheme::S => Variant::Ste,
            Scheme::D => Variant::Dense,
        }
    }

    pub fn forward_mode(self) -> ForwardMode {
        self.variant().forward_mode()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    /// Iteration counts at which to snapshot; step 0 is always recorded.
    pub record_at: Vec<u64>,
    /// Constant learning rate for the probe run.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

/// Trains a copy of `model` under `scheme` and snapshots `mask_of(W_t)` at the
/// requested iterations. With identical `model` and `config`, both schemes see
/// the same minibatch sequence.
pub fn record_scheme(model: &MlpModel<f32>, data: &Dataset, scheme: Scheme, config: &SchemeConfig) -> Result<Vec<MaskSnapshot>> {
    let mut model = model.clone();
    let mut optim = OptimState::new(&model, config.sgd);
    let variant = scheme.variant();
    let last = config.record_at.iter().copied().max().unwrap_or(0);
    let mut snapshots = vec![MaskSnapshot::of_model(&model, 0)?];
    let mut step = 0u64;
    let mut epoch = 0;
    while step < last {
        for batch in batches(data.len(), config.batch_size, epoch_seed(config.seed, epoch)) {
            if step >= last {
                break;
            }
            let x = data.features.gather_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (logits, cache) = model.forward(&x, variant.forward_mode())?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step: step as usize,
                    msg: format!("loss is {loss}"),
                });
            }
            let grads = model.backward(&cache, &grad)?;
            optim.step(&mut model, &grads, None, variant, config.lr)?;
            step += 1;
            if config.record_at.contains(&step) {
                snapshots.push(MaskSnapshot::of_model(&model, step)?);
            }
        }
        epoch += 1;
    }
    Ok(snapshots)
}

/// Scheme S: sparse-forward STE training.
pub fn record_scheme_sparse(model: &MlpModel<f32>, data: &Dataset, config: &SchemeConfig) -> Result<Vec<MaskSnapshot>> {
    record_scheme(model, data, Scheme::S, config)
}

/// Scheme D: dense-forward SGD training, masks taken by post-hoc projection.
pub fn record_scheme_dense(model: &MlpModel<f32>, data: &Dataset, config: &SchemeConfig) -> Result<Vec<MaskSnapshot>> {
    record_scheme(model, data, Scheme::D, config)
}

/// `SAD_{0:t}` for every snapshot after the first.
pub fn sad_from_start(snapshots: &[MaskSnapshot]) -> Result<Vec<SadRecord>> {
    let Some(first) = snapshots.first() else {
        return Ok(Vec::new());
    };
    snapshots[1..].iter().map(|s| sad(first, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(step: u64, layers: &[&[u8]]) -> MaskSnapshot {
        MaskSnapshot {
            step,
            masks: layers
                .iter()
                .map(|b| Mask::new(1, b.len(), b.to_vec()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn identical_snapshots_have_zero_sad() {
        let a = snap(0, &[&[1, 0, 1, 0], &[1, 1, 0, 0]]);
        let r = sad(&a, &a).unwrap();
        assert_eq!(r.per_layer, vec![0, 0]);
        assert_eq!(r.total, 0);
    }

    #[test]
    fn hamming_examples() {
        let r = sad(&snap(0, &[&[1, 0, 1, 0]]), &snap(5, &[&[0, 1, 1, 0]])).unwrap();
        assert_eq!((r.step_i, r.step_j, r.total), (0, 5, 2));
        assert_eq!(r.normalized, vec![0.5]);
        let r = sad(&snap(0, &[&[1, 1, 0, 0]]), &snap(1, &[&[0, 0, 1, 1]])).unwrap();
        assert_eq!(r.total, 4);
    }

    #[test]
    fn total_is_sum_of_layers() {
        let r = sad(
            &snap(0, &[&[1, 1, 0, 0], &[1, 0, 0, 1, 1, 0, 0, 1]]),
            &snap(1, &[&[1, 0, 1, 0], &[0, 1, 0, 1, 0, 1, 1, 0]]),
        )
        .unwrap();
        assert_eq!(r.per_layer, vec![2, 6]);
        assert_eq!(r.total, 8);
    }

    #[test]
    fn mismatched_snapshots_are_rejected() {
        assert!(sad(&snap(0, &[&[1, 0]]), &snap(0, &[&[1, 0], &[0, 1]])).is_err());
        assert!(sad(&snap(0, &[&[1, 0]]), &snap(0, &[&[1, 0, 0, 1]])).is_err());
    }

    #[test]
    fn jsonl_format() {
        let r = sad(&snap(0, &[&[1, 0, 1, 0]]), &snap(5, &[&[0, 1, 1, 0]])).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [&r, &r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"step_i":0,"step_j":5,"per_layer":[2],"total":2,"normalized":[0.5]}"#
        );
        assert_eq!(read_jsonl(&text).unwrap(), vec![r.clone(), r]);
    }
}
