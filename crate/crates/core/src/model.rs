//! Multilayer perceptron with manual backpropagation.
//!
//! Weights are stored `out x in`, so N:M groups run along the input dimension.
//! In sparse mode every patterned layer multiplies by `project(w)`; backward
//! returns the exact gradient with respect to the weights that were actually
//! used, and never masks it. The optimizer decides what to do with it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nm::{mask_of, project, Mask, SparsityPattern};
use crate::rng::{tags, SeededRng};
use crate::tensor::{
    add_row_vector, column_sums, decode_nmsp, encode_nmsp, matmul, matmul_nt, matmul_tn, relu,
    relu_backward, DenseMatrix, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Patterned layers compute with `S(W, N, M)`.
    Sparse,
    /// Raw dense weights everywhere.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T = f32> {
    pub w: DenseMatrix<T>,
    pub bias: Vec<T>,
    pattern: Option<SparsityPattern>,
    mask: Option<Mask>,
}

impl<T: Real> LayerState<T> {
    pub fn new(w: DenseMatrix<T>, bias: Vec<T>, pattern: Option<SparsityPattern>) -> Result<Self> {
        if bias.len() != w.rows() {
            return Err(Error::shape("layer bias", w.shape(), (1, bias.len())));
        }
        if let Some(p) = pattern {
            p.check_cols(w.cols()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(Self {
            w,
            bias,
            pattern,
            mask: None,
        })
    }

    pub fn pattern(&self) -> Option<SparsityPattern> {
        self.pattern
    }

    /// Mask cached by the most recent forward pass.
    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T = f32> {
    layers: Vec<LayerState<T>>,
    version: u64,
}

/// Activations saved by `forward` for use in `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    mode: ForwardMode,
    version: u64,
    inputs: Vec<DenseMatrix<T>>,
    pre_activations: Vec<DenseMatrix<T>>,
    used_weights: Vec<DenseMatrix<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    /// The weight matrix each layer multiplied by (`W̃` for patterned layers in sparse mode).
    pub fn used_weights(&self) -> &[DenseMatrix<T>] {
        &self.used_weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    pub weights: Vec<DenseMatrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.all_finite())
            && self.biases.iter().flatten().all(|b| b.is_finite())
    }
}

impl<T: Real> MlpModel<T> {
    /// He-normal weights, zero biases. `pattern` applies to every layer except the
    /// final classifier.
    pub fn init(dims: &[usize], pattern: Option<SparsityPattern>, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("need at least input and output dims".into()));
        }
        let patterns: Vec<_> = (0..dims.len() - 1)
            .map(|l| if l + 2 < dims.len() { pattern } else { None })
            .collect();
        Self::init_with_patterns(dims, &patterns, seed)
    }

    pub fn init_with_patterns(
        dims: &[usize],
        patterns: &[Option<SparsityPattern>],
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 || patterns.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} dims need {} layer patterns, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                patterns.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        for (l, p) in patterns.iter().enumerate() {
            if let Some(p) = p {
                if dims[l] % p.m() != 0 {
                    return Err(Error::Config(format!(
                        "layer {l} input dim {} not divisible by {} (pattern {p})",
                        dims[l],
                        p.m()
                    )));
                }
            }
        }
        let mut rng = SeededRng::new(SeededRng::derive(seed, tags::INIT));
        let mut layers = Vec::with_capacity(patterns.len());
        for (l, &pattern) in patterns.iter().enumerate() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = DenseMatrix::from_fn(fan_out, fan_in, |_, _| T::from_f64(std * rng.normal()));
            layers.push(LayerState::new(w, vec![T::ZERO; fan_out], pattern)?);
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<LayerState<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[LayerState<T>] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [LayerState<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn patterns(&self) -> Vec<Option<SparsityPattern>> {
        self.layers.iter().map(|l| l.pattern).collect()
    }

    /// Indices of layers that carry a sparsity pattern.
    pub fn sparse_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].pattern.is_some()).collect()
    }

    /// `mask_of(w)` for every patterned layer, in layer order.
    pub fn current_masks(&self) -> Result<Vec<Mask>> {
        self.layers
            .iter()
            .filter_map(|l| l.pattern.map(|p| mask_of(&l.w, p)))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    w: l.w.cast(),
                    bias: l.bias.iter().map(|b| U::from_f64(b.to_f64())).collect(),
                    pattern: l.pattern,
                    mask: l.mask.clone(),
                })
                .collect(),
            version: 0,
        }
    }

    fn run(&self, x: &DenseMatrix<T>, mode: ForwardMode) -> Result<(DenseMatrix<T>, ForwardCache<T>, Vec<Option<Mask>>)> {
        if x.cols() != self.layers[0].in_dim() {
            return Err(Error::shape("forward input", x.shape(), self.layers[0].w.shape()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut used_weights = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (used, mask) = match (layer.pattern, mode) {
                (Some(p), ForwardMode::Sparse) => {
                    let (wt, mask) = project(&layer.w, p)?;
                    (wt, Some(mask))
                }
                (Some(p), ForwardMode::Dense) => (layer.w.clone(), Some(mask_of(&layer.w, p)?)),
                (None, _) => (layer.w.clone(), None),
            };
            let mut z = matmul_nt(&a, &used)?;
            add_row_vector(&mut z, &layer.bias)?;
            inputs.push(a);
            used_weights.push(used);
            masks.push(mask);
            if l < last {
                a = relu(&z);
                pre_activations.push(z);
            } else {
                a = z;
            }
        }
        let cache = ForwardCache {
            mode,
            version: self.version,
            inputs,
            pre_activations,
            used_weights,
        };
        Ok((a, cache, masks))
    }

    /// Runs the network and caches each patterned layer's mask.
    pub fn forward(&mut self, x: &DenseMatrix<T>, mode: ForwardMode) -> Result<(DenseMatrix<T>, ForwardCache<T>)> {
        let (logits, cache, masks) = self.run(x, mode)?;
        for (layer, mask) in self.layers.iter_mut().zip(masks) {
            if mask.is_some() {
                layer.mask = mask;
            }
        }
        Ok((logits, cache))
    }

    /// Logits only; leaves cached masks untouched.
    pub fn predict(&self, x: &DenseMatrix<T>, mode: ForwardMode) -> Result<DenseMatrix<T>> {
        Ok(self.run(x, mode)?.0)
    }

    /// Gradients with respect to the weights used in the matching forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &DenseMatrix<T>) -> Result<GradientSet<T>> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage("backward called with a stale forward cache".into()));
        }
        let batch = cache.inputs[0].rows();
        let out_dim = self.layers.last().unwrap().out_dim();
        if grad_logits.shape() != (batch, out_dim) {
            return Err(Error::shape("backward grad_logits", grad_logits.shape(), (batch, out_dim)));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = grad_logits.clone();
        for l in (0..n).rev() {
            // inputᵀ·upstream skips the (often many) zero activations; transposing gives out x in.
            weights.push(matmul_tn(&cache.inputs[l], &upstream)?.transpose());
            biases.push(column_sums(&upstream));
            if l > 0 {
                let dx = matmul(&upstream, &cache.used_weights[l])?;
                upstream = relu_backward(&cache.pre_activations[l - 1], &dx)?;
            }
        }
        weights.reverse();
        biases.reverse();
        Ok(GradientSet { weights, biases })
    }
}

/// Describes the tensors in a checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dims: Vec<usize>,
    pub patterns: Vec<Option<SparsityPattern>>,
    pub seed: u64,
    pub step: u64,
    /// Tensor order inside the blob.
    pub layout: String,
}

impl MlpModel<f32> {
    /// Concatenated `NMSP` matrices: for each layer its weight (`out x in`) then its bias (`1 x out`).
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for layer in &self.layers {
            buf.extend(encode_nmsp(&layer.w));
            let bias = DenseMatrix::new(1, layer.bias.len(), layer.bias.clone()).expect("nonempty bias");
            buf.extend(encode_nmsp(&bias));
        }
        buf
    }

    pub fn checkpoint_manifest(&self, seed: u64, step: u64) -> CheckpointManifest {
        CheckpointManifest {
            dims: self.dims(),
            patterns: self.patterns(),
            seed,
            step,
            layout: "per layer: weight (out x in), bias (1 x out)".into(),
        }
    }

    pub fn from_checkpoint(bytes: &[u8], manifest: &CheckpointManifest) -> Result<Self> {
        if manifest.patterns.len() + 1 != manifest.dims.len() {
            return Err(Error::format(0, "manifest dims and patterns disagree"));
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for (l, &pattern) in manifest.patterns.iter().enumerate() {
            let (w, next) = decode_nmsp(bytes, offset)?;
            let (bias, next) = decode_nmsp(bytes, next)?;
            if w.shape() != (manifest.dims[l + 1], manifest.dims[l]) || bias.rows() != 1 {
                return Err(Error::format(offset, format!("layer {l} shape disagrees with manifest")));
            }
            layers.push(LayerState::new(w, bias.into_data(), pattern)?);
            offset = next;
        }
        if offset != bytes.len() {
            return Err(Error::format(offset, "trailing bytes in checkpoint"));
        }
        Self::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_cross_entropy;

    fn pat(s: &str) -> Option<SparsityPattern> {
        Some(s.parse().unwrap())
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = SeededRng::new(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MlpModel::<f32>::init(&[16, 8, 4], pat("2:4"), 5).unwrap();
        let b = MlpModel::<f32>::init(&[16, 8, 4], pat("2:4"), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_eq!(a.patterns(), vec![pat("2:4"), None]);
        assert_ne!(a, MlpModel::<f32>::init(&[16, 8, 4], pat("2:4"), 6).unwrap());
    }

    #[test]
    fn init_weight_scale_is_he_normal() {
        let model = MlpModel::<f64>::init(&[512, 256, 10], None, 1).unwrap();
        let w = model.layers()[0].w.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 512.0).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std} target {target}");
    }

    #[test]
    fn init_rejects_indivisible_dims() {
        // the classifier is never patterned, so only its input may be indivisible
        assert!(MlpModel::<f32>::init(&[784, 100, 10], pat("3:8"), 1).is_ok());
        assert!(matches!(
            MlpModel::<f32>::init(&[784, 100, 100, 10], pat("3:8"), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dense_pattern_sparse_equals_dense() {
        let mut model = MlpModel::<f64>::init(&[8, 8, 3], pat("4:4"), 2).unwrap();
        let x = batch(5, 8, 3);
        let (sparse, _) = model.forward(&x, ForwardMode::Sparse).unwrap();
        let (dense, _) = model.forward(&x, ForwardMode::Dense).unwrap();
        assert_eq!(sparse, dense);
    }

    #[test]
    fn zero_input_gives_bias_chain() {
        let mut model = MlpModel::<f64>::init(&[4, 4, 2], pat("2:4"), 2).unwrap();
        {
            let layers = model.layers_mut();
            layers[0].bias = vec![1.0, -1.0, 0.5, 2.0];
            layers[1].bias = vec![0.25, -0.25];
        }
        let x = DenseMatrix::zeros(1, 4);
        let (logits, _) = model.forward(&x, ForwardMode::Sparse).unwrap();
        let hidden = [1.0, 0.0, 0.5, 2.0];
        let w2 = &model.layers()[1].w;
        for o in 0..2 {
            let expected: f64 = 0.0 + (0..4).map(|k| hidden[k] * w2.get(o, k)).fold(0.0, |a, b| a + b) + model.layers()[1].bias[o];
            assert!((logits.get(0, o) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_forward_matches_preprojected_dense_model() {
        let mut model = MlpModel::<f64>::init(&[16, 8, 4], pat("2:4"), 7).unwrap();
        let x = batch(6, 16, 8);
        let (sparse_logits, _) = model.forward(&x, ForwardMode::Sparse).unwrap();
        let mut pre = model.clone();
        for layer in pre.layers_mut() {
            if let Some(p) = layer.pattern() {
                layer.w = project(&layer.w, p).unwrap().0;
            }
        }
        let dense_logits = pre.predict(&x, ForwardMode::Dense).unwrap();
        assert_eq!(sparse_logits, dense_logits);
    }

    #[test]
    fn forward_caches_current_masks_without_touching_weights() {
        let mut model = MlpModel::<f32>::init(&[16, 8, 4], pat("2:4"), 9).unwrap();
        let before = model.layers()[0].w.clone();
        let x = batch(3, 16, 1).cast();
        model.forward(&x, ForwardMode::Sparse).unwrap();
        assert_eq!(model.layers()[0].w, before);
        assert_eq!(model.layers()[0].mask().unwrap(), &mask_of(&before, "2:4".parse().unwrap()).unwrap());
        assert!(model.layers()[1].mask().is_none());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut model = MlpModel::<f64>::init(&[8, 4, 2], pat("2:4"), 1).unwrap();
        let x = batch(2, 8, 2);
        let (logits, cache) = model.forward(&x, ForwardMode::Sparse).unwrap();
        model.layers_mut()[0].w.data_mut()[0] += 1.0;
        assert!(matches!(model.backward(&cache, &logits), Err(Error::Usage(_))));
    }

    #[test]
    fn single_linear_layer_gradient_is_xt_times_upstream() {
        let mut model = MlpModel::<f64>::init(&[6, 3], None, 4).unwrap();
        let x = batch(5, 6, 5);
        let (_, cache) = model.forward(&x, ForwardMode::Dense).unwrap();
        let upstream = batch(5, 3, 6);
        let grads = model.backward(&cache, &upstream).unwrap();
        // out x in layout: (xᵀ · upstream)ᵀ
        let expected = matmul(&x.transpose(), &upstream).unwrap().transpose();
        for (a, b) in grads.weights[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(grads.biases[0], column_sums(&upstream));
    }

    #[test]
    fn pruned_positions_receive_gradient() {
        let mut model = MlpModel::<f64>::init(&[8, 4, 2], pat("2:4"), 3).unwrap();
        let x = batch(4, 8, 4);
        let (logits, cache) = model.forward(&x, ForwardMode::Sparse).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
        let grads = model.backward(&cache, &grad).unwrap();
        let mask = model.layers()[0].mask().unwrap();
        let pruned_nonzero = grads.weights[0]
            .data()
            .iter()
            .zip(mask.bits())
            .filter(|(g, &b)| b == 0 && **g != 0.0)
            .count();
        assert!(pruned_nonzero > 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = MlpModel::<f32>::init(&[16, 8, 4], pat("2:4"), 11).unwrap();
        let bytes = model.checkpoint_bytes();
        let manifest = model.checkpoint_manifest(11, 0);
        let json = serde_json::to_string(&manifest).unwrap();
        let back: CheckpointManifest = serde_json::from_str(&json).unwrap();
        let restored = MlpModel::from_checkpoint(&bytes, &back).unwrap();
        assert_eq!(restored.layers()[0].w, model.layers()[0].w);
        assert_eq!(restored.patterns(), model.patterns());
        assert!(MlpModel::from_checkpoint(&bytes[..bytes.len() - 4], &back).is_err());
    }
}
