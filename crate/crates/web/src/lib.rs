//! WebAssembly bindings behind `www/index.html`. Each export returns JSON so the
//! page needs nothing beyond `JSON.parse`; the plain functions are usable (and
//! tested) natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nmsparse::data::{synthetic_split, SyntheticKind};
use nmsparse::model::MlpModel;
use nmsparse::nm::{compress, project, sparsity_ratio, SparsityPattern};
use nmsparse::optim::{LrSchedule, Variant};
use nmsparse::tensor::DenseMatrix;
use nmsparse::train::{train, DataSource, TrainConfig};

#[derive(Debug, Serialize)]
pub struct Projection {
    pub rows: usize,
    pub cols: usize,
    pub projected: Vec<f32>,
    pub mask: Vec<u8>,
    pub sparsity: f64,
    /// Compressed form: kept values and their in-group positions, row-major.
    pub values: Vec<f32>,
    pub indices: Vec<usize>,
}

pub fn projection(values: &[f32], rows: usize, cols: usize, pattern: &str) -> Result<Projection, String> {
    let pattern: SparsityPattern = pattern.parse().map_err(|e| format!("{e}"))?;
    let w = DenseMatrix::new(rows, cols, values.to_vec()).map_err(|e| e.to_string())?;
    let (wt, mask) = project(&w, pattern).map_err(|e| e.to_string())?;
    let c = compress(&wt, pattern).map_err(|e| e.to_string())?;
    Ok(Projection {
        rows,
        cols,
        sparsity: sparsity_ratio(&mask),
        mask: mask.bits().to_vec(),
        values: c.values().to_vec(),
        indices: c.indices().iter().collect(),
        projected: wt.into_data(),
    })
}

/// Learning rate at `points` evenly spaced fractional epochs in `[0, total]`.
pub fn schedule_curve(peak: f64, warmup: usize, total: usize, points: usize) -> Result<Vec<[f64; 2]>, String> {
    let s = LrSchedule::new(peak, warmup, total).map_err(|e| e.to_string())?;
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let e = total as f64 * i as f64 / (points - 1) as f64;
            s.lr_at(e).map(|lr| [e, lr]).map_err(|e| e.to_string())
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub sad: u64,
}

/// Small SR-STE (or any variant) run on the XOR or blobs toy data.
pub fn toy_training(variant: &str, pattern: &str, dataset: &str, epochs: usize, seed: u64) -> Result<Vec<EpochPoint>, String> {
    let variant: Variant = variant.parse().map_err(|e| format!("{e}"))?;
    let pattern: SparsityPattern = pattern.parse().map_err(|e| format!("{e}"))?;
    let (data, kind) = match dataset {
        "xor" => (DataSource::Xor, SyntheticKind::Xor),
        "blobs" => (DataSource::Blobs, SyntheticKind::Blobs),
        other => return Err(format!("unknown dataset {other:?}")),
    };
    let config = TrainConfig {
        variant,
        pattern: Some(pattern),
        hidden: vec![32, 16],
        epochs,
        batch_size: 32,
        lr_peak: 0.05,
        warmup_epochs: 1.min(epochs.saturating_sub(1)),
        seed,
        data,
        synthetic_train: 2000,
        synthetic_test: 500,
        synthetic_dims: 16,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    let (train_set, test_set) =
        synthetic_split(kind, config.synthetic_train, config.synthetic_test, config.synthetic_dims, seed).map_err(|e| e.to_string())?;
    let dims = config.layer_dims(train_set.dims(), train_set.num_classes);
    let mut model = MlpModel::<f32>::init(&dims, config.pattern, seed).map_err(|e| e.to_string())?;
    let report = train(&mut model, &train_set, &test_set, &config).map_err(|e| e.to_string())?;
    Ok(report
        .metrics
        .iter()
        .filter(|m| m.split == "test")
        .map(|m| EpochPoint {
            epoch: m.epoch,
            test_accuracy: m.accuracy,
            sad: m.sad_total_prev_epoch,
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = projectMatrix)]
pub fn project_matrix(values: &[f32], rows: usize, cols: usize, pattern: &str) -> Result<String, JsError> {
    to_js(projection(values, rows, cols, pattern))
}

#[wasm_bindgen(js_name = lrSchedule)]
pub fn lr_schedule(peak: f64, warmup: usize, total: usize, points: usize) -> Result<String, JsError> {
    to_js(schedule_curve(peak, warmup, total, points))
}

#[wasm_bindgen(js_name = trainToy)]
pub fn train_toy(variant: &str, pattern: &str, dataset: &str, epochs: usize, seed: u64) -> Result<String, JsError> {
    to_js(toy_training(variant, pattern, dataset, epochs, seed))
}
