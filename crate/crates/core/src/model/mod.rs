//! Image classifier with BatchNorm layers.
//!
//! [`ModelState`] is a plain value: the trainable parameters in the order
//! given by [`Architecture::param_specs`] and one [`BnBuffers`] per BN layer.
//! Graph construction lives in [`arch`]; this module exposes the value-level
//! operations used by the federation simulator.

pub mod arch;
pub mod checkpoint;
pub mod maps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use arch::{Activation, Architecture, BnNorm, CnnConfig, ParamKind, ParamSpec};

use crate::autodiff::{grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl BnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config("bn.momentum", "must be in (0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("bn.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnBuffers {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnBuffers {
    pub fn identity(channels: usize) -> Self {
        BnBuffers {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }
}

/// Per-layer batch mean and biased batch variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub bn: BnConfig,
    pub params: Vec<Tensor>,
    pub buffers: Vec<BnBuffers>,
}

impl ModelState {
    /// Kaiming-normal convolutions, unit BN affine, small uniform head.
    pub fn init(arch: Architecture, bn: BnConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        bn.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()
            .iter()
            .map(|spec| {
                let numel: usize = spec.shape.iter().product();
                let data = match (spec.kind, spec.shape.len()) {
                    (ParamKind::Weight, 4) => {
                        let fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
                        (0..numel).map(|_| normal.sample(&mut rng)).collect()
                    }
                    (ParamKind::Weight, _) => {
                        let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                        let u = Uniform::new(-bound, bound).expect("bound > 0");
                        (0..numel).map(|_| u.sample(&mut rng)).collect()
                    }
                    (ParamKind::Gamma, _) => vec![1.0; numel],
                    (ParamKind::Beta, _) | (ParamKind::Bias, _) => vec![0.0; numel],
                };
                Tensor::from_parts(spec.shape.clone(), data)
            })
            .collect();
        let buffers = arch
            .bn_specs()
            .iter()
            .map(|s| BnBuffers::identity(s.channels))
            .collect();
        Ok(ModelState {
            arch,
            bn,
            params,
            buffers,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.arch.param_specs()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Checks that parameter and buffer shapes follow the architecture.
    pub fn validate(&self) -> Result<()> {
        let specs = self.arch.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&self.params) {
            if s.shape != p.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, found {:?}",
                    s.name(),
                    s.shape,
                    p.shape()
                )));
            }
        }
        let bn = self.arch.bn_specs();
        if bn.len() != self.buffers.len() {
            return Err(Error::Shape("BN buffer count".into()));
        }
        for (s, b) in bn.iter().zip(&self.buffers) {
            if b.running_mean.shape() != [s.channels] || b.running_var.shape() != [s.channels] {
                return Err(Error::Shape(format!("layer{} running statistics", s.layer)));
            }
            if b.running_var.data().iter().any(|v| *v < 0.0) {
                return Err(Error::NegativeVariance { layer: s.layer });
            }
        }
        Ok(())
    }

    pub fn fixed_stats(&self) -> Vec<(Tensor, Tensor)> {
        self.buffers
            .iter()
            .map(|b| (b.running_mean.clone(), b.running_var.clone()))
            .collect()
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.params.iter().cloned().map(Var::param).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Shape(format!("batch images must be [N>=1, C, H, W], got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(Error::Shape(format!("{} labels for {} images", labels.len(), s[0])));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!("label {l} out of range 0..{num_classes}")));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn stats_from_graph(stats: &[(Var, Var)]) -> Vec<BatchStats> {
    stats
        .iter()
        .map(|(m, v)| BatchStats {
            mean: m.value().clone(),
            var: v.value().clone(),
        })
        .collect()
}

/// Logits and (train mode only) per-BN-layer batch statistics.
///
/// Eval mode normalizes with the running statistics and never mutates them.
pub fn forward(state: &ModelState, images: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BatchStats>)> {
    let _g = no_grad();
    let params: Vec<Var> = state.params.iter().cloned().map(Var::constant).collect();
    let fixed;
    let norm = match mode {
        Mode::Train => BnNorm::Batch,
        Mode::Eval => {
            fixed = state.fixed_stats();
            BnNorm::Fixed(&fixed)
        }
    };
    let out = arch::build_forward(
        &state.arch,
        &params,
        &Var::constant(images.clone()),
        norm,
        state.bn.epsilon,
        true,
    )?;
    Ok((out.logits.value().clone(), stats_from_graph(&out.batch_stats)))
}

/// Pooled penultimate features `[N, F]` in eval mode.
pub fn features(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let _g = no_grad();
    let params: Vec<Var> = state.params.iter().cloned().map(Var::constant).collect();
    let fixed = state.fixed_stats();
    let out = arch::build_forward(
        &state.arch,
        &params,
        &Var::constant(images.clone()),
        BnNorm::Fixed(&fixed),
        state.bn.epsilon,
        true,
    )?;
    Ok(out.features)
}

/// Last-block activations before global pooling, `[N, C*h*w]`, eval mode.
pub fn feature_map(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    let _g = no_grad();
    let params: Vec<Var> = state.params.iter().cloned().map(Var::constant).collect();
    let fixed = state.fixed_stats();
    let out = arch::build_forward(
        &state.arch,
        &params,
        &Var::constant(images.clone()),
        BnNorm::Fixed(&fixed),
        state.bn.epsilon,
        true,
    )?;
    Ok(out.feature_map)
}

/// Momentum update of running statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn bn_update(buffers: &[BnBuffers], stats: &[BatchStats], momentum: f64) -> Result<Vec<BnBuffers>> {
    if buffers.len() != stats.len() {
        return Err(Error::Shape(format!(
            "{} BN layers but {} batch statistics",
            buffers.len(),
            stats.len()
        )));
    }
    buffers
        .iter()
        .zip(stats)
        .enumerate()
        .map(|(layer, (b, s))| {
            if s.var.data().iter().any(|v| *v < 0.0) {
                return Err(Error::NegativeVariance { layer });
            }
            let blend = |old: &Tensor, new: &Tensor| old.zip_map(new, |o, n| (1.0 - momentum) * o + momentum * n);
            Ok(BnBuffers {
                running_mean: blend(&b.running_mean, &s.mean)?,
                running_var: blend(&b.running_var, &s.var)?,
            })
        })
        .collect()
}

pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
}

/// Mean cross-entropy and its gradient with respect to every trainable
/// parameter.
pub fn loss_and_grads(state: &ModelState, batch: &Batch, mode: Mode) -> Result<LossAndGrads> {
    let cfg = state.arch.config();
    let params = state.param_vars();
    let fixed;
    let norm = match mode {
        Mode::Train => BnNorm::Batch,
        Mode::Eval => {
            fixed = state.fixed_stats();
            BnNorm::Fixed(&fixed)
        }
    };
    let out = arch::build_forward(
        &state.arch,
        &params,
        &Var::constant(batch.images.clone()),
        norm,
        state.bn.epsilon,
        true,
    )?;
    let targets = Var::constant(arch::one_hot(&batch.labels, cfg.num_classes));
    let loss = arch::cross_entropy(&out.logits, &targets);
    if !loss.item().is_finite() {
        return Err(Error::non_finite("loss"));
    }
    let grads = grad(&loss, &params, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect();
    Ok(LossAndGrads {
        loss: loss.item(),
        grads,
        batch_stats: stats_from_graph(&out.batch_stats),
    })
}

/// Gradients of each example's own cross-entropy term, all computed through
/// one shared train-mode forward pass (BN statistics couple the examples).
/// Their mean equals the batch gradient.
pub fn per_example_grads(state: &ModelState, batch: &Batch) -> Result<(Vec<Vec<Tensor>>, Vec<BatchStats>)> {
    let cfg = state.arch.config();
    let params = state.param_vars();
    let out = arch::build_forward(
        &state.arch,
        &params,
        &Var::constant(batch.images.clone()),
        BnNorm::Batch,
        state.bn.epsilon,
        true,
    )?;
    let n = batch.len();
    let k = cfg.num_classes;
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = Tensor::zeros(&[n, k]);
        // CE is a mean over rows; weight row i by n to get its own term
        t.data_mut()[i * k + batch.labels[i]] = n as f64;
        let loss = arch::cross_entropy(&out.logits, &Var::constant(t));
        if !loss.item().is_finite() {
            return Err(Error::non_finite(format!("loss of example {i}")));
        }
        per.push(
            grad(&loss, &params, false)
                .into_iter()
                .map(|g| g.value().clone())
                .collect(),
        );
    }
    Ok((per, stats_from_graph(&out.batch_stats)))
}

/// Converts images stored as `H x W x C` interleaved slices to `[N, C, H, W]`.
pub fn stack_hwc(images: &[&[f64]], h: usize, w: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        for ch in 0..c {
            for p in 0..h * w {
                data.push(img[p * c + ch]);
            }
        }
    }
    Tensor::from_parts(vec![images.len(), c, h, w], data)
}

/// Classification accuracy in eval mode.
pub fn accuracy(state: &ModelState, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (logits, _) = forward(state, images, Mode::Eval)?;
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
