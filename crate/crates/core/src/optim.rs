//! Weight-update rules for dense and N:M sparse training, plus the
//! warmup + cosine learning-rate schedule.
//!
//! Every masked rule applies `g(W̃)` (the gradient taken at the projected
//! weights) to the dense master weights `W`, then adds a refinement term on the
//! pruned positions `Ē` only:
//!
//! | variant        | effective gradient                         |
//! |----------------|--------------------------------------------|
//! | `Ste`          | `g(W̃)`                                     |
//! | `SrSte`        | `g(W̃) + λ_W · (Ē ⊙ W)`                     |
//! | `SignRefined`  | `g(W̃) + λ_c · (Ē ⊙ sgn(W))`, `sgn(0) = 0`  |
//! | `GradRefined`  | `g(W̃) + λ_g · (Ē ⊙ (γ_t · g(W)))`          |
//!
//! With momentum, the effective gradient feeds the buffer and the buffer is
//! scaled by `γ_t`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardMode, GradientSet, LayerState, MlpModel};
use crate::tensor::{DenseMatrix, Real};

/// Default SR-STE strength.
pub const DEFAULT_LAMBDA_W: f64 = 0.0002;

/// The `λ_W` ablation grid.
pub const LAMBDA_W_GRID: [f64; 4] = [0.0, 0.0002, 0.00045, -0.00002];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Dense,
    Ste,
    SrSte { lambda_w: f64 },
    SignRefined { lambda_c: f64 },
    GradRefined { lambda_g: f64 },
}

impl Variant {
    pub fn forward_mode(&self) -> ForwardMode {
        match self {
            Variant::Dense => ForwardMode::Dense,
            _ => ForwardMode::Sparse,
        }
    }

    /// Whether the rule needs `g(W)` from an extra dense forward/backward.
    pub fn needs_dense_gradient(&self) -> bool {
        matches!(self, Variant::GradRefined { .. })
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            Variant::Dense | Variant::Ste => None,
            Variant::SrSte { lambda_w } => Some(lambda_w),
            Variant::SignRefined { lambda_c } => Some(lambda_c),
            Variant::GradRefined { lambda_g } => Some(lambda_g),
        }
    }

    /// Same rule with a different refinement strength; no-op for `Dense` and `Ste`.
    pub fn with_lambda(self, lambda: f64) -> Self {
        match self {
            Variant::SrSte { .. } => Variant::SrSte { lambda_w: lambda },
            Variant::SignRefined { .. } => Variant::SignRefined { lambda_c: lambda },
            Variant::GradRefined { .. } => Variant::GradRefined { lambda_g: lambda },
            other => other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Ste => "ste",
            Variant::SrSte { .. } => "sr-ste",
            Variant::SignRefined { .. } => "sign-refined",
            Variant::GradRefined { .. } => "grad-refined",
        }
    }

    fn validate(&self) -> Result<()> {
        match self.lambda() {
            Some(l) if !l.is_finite() => Err(Error::Config(format!("lambda must be finite, got {l}"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lambda() {
            Some(l) => write!(f, "{}:{}", self.name(), l),
            None => f.write_str(self.name()),
        }
    }
}

/// Parses `dense`, `ste`, `sr-ste`, `sign-refined`, `grad-refined`, optionally
/// followed by `:<lambda>` (e.g. `sr-ste:0.00045`).
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, lambda) = match s.split_once(':') {
            Some((n, l)) => {
                let l = l
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad lambda in variant {s:?}")))?;
                (n, Some(l))
            }
            None => (s, None),
        };
        let v = match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "dense" => Variant::Dense,
            "ste" => Variant::Ste,
            "sr-ste" | "srste" => Variant::SrSte {
                lambda_w: lambda.unwrap_or(DEFAULT_LAMBDA_W),
            },
            "sign-refined" | "sign" => Variant::SignRefined {
                lambda_c: lambda.unwrap_or(DEFAULT_LAMBDA_W),
            },
            "grad-refined" | "grad" => Variant::GradRefined {
                lambda_g: lambda.unwrap_or(DEFAULT_LAMBDA_W),
            },
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        };
        if lambda.is_some() && v.lambda().is_none() {
            return Err(Error::Config(format!("variant {name} takes no lambda")));
        }
        v.validate()?;
        Ok(v)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Linear warmup from 0 to `peak`, then half-cosine decay to 0 at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        let s = Self {
            peak,
            warmup_epochs,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::Config(format!("peak learning rate must be positive, got {}", self.peak)));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        let total = self.total_epochs as f64;
        if !(0.0..=total).contains(&epoch) {
            return Err(Error::Input(format!("epoch {epoch} outside [0, {total}]")));
        }
        let warmup = self.warmup_epochs as f64;
        if epoch < warmup {
            return Ok(self.peak * epoch / warmup);
        }
        let progress = (epoch - warmup) / (total - warmup);
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Momentum buffers and step counter.
#[derive(Debug, Clone)]
pub struct OptimState<T = f32> {
    pub config: SgdConfig,
    weight_buffers: Vec<DenseMatrix<T>>,
    bias_buffers: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(model: &MlpModel<T>, config: SgdConfig) -> Self {
        Self {
            config,
            weight_buffers: model
                .layers()
                .iter()
                .map(|l| DenseMatrix::zeros(l.w.rows(), l.w.cols()))
                .collect(),
            bias_buffers: model.layers().iter().map(|l| vec![T::ZERO; l.bias.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every layer of `model`.
    ///
    /// `grads` come from the forward pass in `variant.forward_mode()`; for
    /// `GradRefined`, `dense_grads` must hold `g(W)` from a dense pass on the
    /// same batch.
    pub fn step(
        &mut self,
        model: &mut MlpModel<T>,
        grads: &GradientSet<T>,
        dense_grads: Option<&GradientSet<T>>,
        variant: Variant,
        lr: f64,
    ) -> Result<()> {
        if grads.weights.len() != model.layers().len() {
            return Err(Error::Usage("gradient set does not match model".into()));
        }
        if variant.needs_dense_gradient() && dense_grads.is_none() {
            return Err(Error::Usage(format!("{variant} needs the dense-forward gradient")));
        }
        let step = self.step as usize;
        let config = self.config;
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            step_layer(
                layer,
                &grads.weights[l],
                &grads.biases[l],
                dense_grads.map(|g| &g.weights[l]),
                variant,
                lr,
                config,
                &mut self.weight_buffers[l],
                &mut self.bias_buffers[l],
            )
            .map_err(|e| match e {
                Error::Numeric { msg, .. } => Error::Numeric { step, msg },
                other => other,
            })?;
        }
        self.step += 1;
        Ok(())
    }
}

/// Update of one layer. Refinement terms only touch layers with a pattern,
/// using the mask cached by the forward pass of the current iteration.
#[allow(clippy::too_many_arguments)]
pub fn step_layer<T: Real>(
    layer: &mut LayerState<T>,
    grad_w: &DenseMatrix<T>,
    grad_b: &[T],
    dense_grad_w: Option<&DenseMatrix<T>>,
    variant: Variant,
    lr: f64,
    config: SgdConfig,
    weight_buffer: &mut DenseMatrix<T>,
    bias_buffer: &mut [T],
) -> Result<()> {
    if grad_w.shape() != layer.w.shape() || grad_b.len() != layer.bias.len() {
        return Err(Error::shape("optimizer step", layer.w.shape(), grad_w.shape()));
    }
    let refine = match (variant, layer.pattern()) {
        (Variant::Dense | Variant::Ste, _) | (_, None) => None,
        (v, Some(_)) => {
            let mask = layer
                .mask()
                .ok_or_else(|| Error::Usage(format!("{v} step on a layer with no cached mask")))?;
            Some((v, mask.complement()))
        }
    };
    let lr_t = T::from_f64(lr);
    let momentum = T::from_f64(config.momentum);
    let decay = T::from_f64(config.weight_decay);
    let use_momentum = config.momentum != 0.0;

    let mut effective = grad_w.clone();
    if let Some((v, pruned)) = &refine {
        let lambda = v.lambda().unwrap_or(0.0);
        if lambda != 0.0 {
            let lambda = T::from_f64(lambda);
            let w = layer.w.data();
            let dense = dense_grad_w.map(|g| g.data());
            if let (Variant::GradRefined { .. }, Some(g)) = (v, dense) {
                if g.len() != w.len() {
                    return Err(Error::shape("dense gradient", layer.w.shape(), (1, g.len())));
                }
            }
            for (i, e) in effective.data_mut().iter_mut().enumerate() {
                if pruned.bits()[i] == 0 {
                    continue;
                }
                let term = match v {
                    Variant::SrSte { .. } => w[i],
                    Variant::SignRefined { .. } => sign(w[i]),
                    Variant::GradRefined { .. } => lr_t * dense.expect("checked above")[i],
                    Variant::Dense | Variant::Ste => unreachable!(),
                };
                *e += lambda * term;
            }
        }
    }
    if config.weight_decay != 0.0 {
        for (e, &w) in effective.data_mut().iter_mut().zip(layer.w.data()) {
            *e += decay * w;
        }
    }

    apply(layer.w.data_mut(), effective.data(), weight_buffer.data_mut(), lr_t, momentum, use_momentum);
    apply(&mut layer.bias, grad_b, bias_buffer, lr_t, momentum, use_momentum);

    if !layer.w.all_finite() || !layer.bias.iter().all(|b| b.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            msg: "non-finite weight after update".into(),
        });
    }
    Ok(())
}

fn apply<T: Real>(params: &mut [T], grad: &[T], buffer: &mut [T], lr: T, momentum: T, use_momentum: bool) {
    if use_momentum {
        for ((p, &g), b) in params.iter_mut().zip(grad).zip(buffer.iter_mut()) {
            *b = momentum * *b + g;
            *p -= lr * *b;
        }
    } else {
        for (p, &g) in params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::ZERO {
        T::ONE
    } else if x < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}
