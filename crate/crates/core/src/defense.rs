//! Differential-privacy mechanisms for client updates.
//!
//! `percentile_gaussian` perturbs an outgoing update with noise calibrated
//! to the q-th percentile of its absolute entries. `dp_sgd_step` clips
//! per-example gradients inside local training and adds noise to their sum.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{global_l2_norm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    None,
    PercentileGaussian,
    DpSgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileMode {
    #[default]
    NearestRank,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub mechanism: Mechanism,
    pub sigma0: f64,
    pub q: f64,
    pub clip_norm: f64,
    pub noise_mult: f64,
    pub percentile: PercentileMode,
    /// Also perturb transmitted BN running statistics.
    pub noise_buffers: bool,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            mechanism: Mechanism::None,
            sigma0: 0.0,
            q: 95.0,
            clip_norm: 1.0,
            noise_mult: 0.0,
            percentile: PercentileMode::NearestRank,
            noise_buffers: false,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn gaussian(sigma0: f64) -> Self {
        DpConfig {
            mechanism: Mechanism::PercentileGaussian,
            sigma0,
            ..Default::default()
        }
    }

    pub fn dp_sgd(clip_norm: f64, noise_mult: f64) -> Self {
        DpConfig {
            mechanism: Mechanism::DpSgd,
            clip_norm,
            noise_mult,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 >= 0.0) {
            return Err(Error::config("dp.sigma0", "must be >= 0"));
        }
        if !(self.q > 0.0 && self.q <= 100.0) {
            return Err(Error::config("dp.q", "must be in (0, 100]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("dp.clip_norm", "must be > 0"));
        }
        if !(self.noise_mult >= 0.0) {
            return Err(Error::config("dp.noise_mult", "must be >= 0"));
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `gauss_10` or `dpsgd_1_0.5`.
    pub fn label(&self) -> String {
        match self.mechanism {
            Mechanism::None => "none".into(),
            Mechanism::PercentileGaussian => format!("gauss_{}", self.sigma0),
            Mechanism::DpSgd => format!("dpsgd_{}_{}", self.clip_norm, self.noise_mult),
        }
    }
}

/// q-th percentile of `values` (`0 < q <= 100`).
pub fn percentile(values: &[f64], q: f64, mode: PercentileMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("percentile of an empty set".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::config("q", "must be in (0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(match mode {
        PercentileMode::NearestRank => {
            let rank = (q / 100.0 * n as f64).ceil() as usize;
            v[rank.clamp(1, n) - 1]
        }
        PercentileMode::Linear => {
            let pos = q / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Noised {
    pub tensors: Vec<Tensor>,
    pub sigma: f64,
}

/// Adds i.i.d. `N(0, sigma)` to every entry, with
/// `sigma = percentile(|entries of all tensors|, q) * sigma0`.
pub fn percentile_gaussian<R: Rng + ?Sized>(
    update: &[Tensor],
    sigma0: f64,
    q: f64,
    mode: PercentileMode,
    rng: &mut R,
) -> Result<Noised> {
    let abs: Vec<f64> = update.iter().flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    if abs.is_empty() {
        return Err(Error::Undefined("empty update".into()));
    }
    if sigma0 == 0.0 {
        return Ok(Noised {
            tensors: update.to_vec(),
            sigma: 0.0,
        });
    }
    let sigma = percentile(&abs, q, mode)? * sigma0;
    if sigma == 0.0 {
        log::warn!("percentile of the update is 0; no noise added");
        return Ok(Noised {
            tensors: update.to_vec(),
            sigma,
        });
    }
    Ok(Noised {
        tensors: add_noise(update, sigma, rng),
        sigma,
    })
}

/// Adds `N(0, sigma)` to every entry using a caller-supplied sigma.
pub fn add_noise<R: Rng + ?Sized>(tensors: &[Tensor], sigma: f64, rng: &mut R) -> Vec<Tensor> {
    tensors
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
            t
        })
        .collect()
}

/// Scales a gradient (all layers jointly) to l2 norm at most `clip_norm`.
pub fn clip(grad: &[Tensor], clip_norm: f64) -> Vec<Tensor> {
    let norm = global_l2_norm(grad);
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    grad.iter().map(|t| t.map(|v| v * scale)).collect()
}

/// Clip each example gradient, sum, add `N(0, noise_mult * clip_norm)` per
/// entry, divide by the batch size.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    per_example: &[Vec<Tensor>],
    clip_norm: f64,
    noise_mult: f64,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if !(clip_norm > 0.0) {
        return Err(Error::config("clip_norm", "must be > 0"));
    }
    if !(noise_mult >= 0.0) {
        return Err(Error::config("noise_mult", "must be >= 0"));
    }
    let first = per_example
        .first()
        .ok_or_else(|| Error::Undefined("DP-SGD step without examples".into()))?;
    let mut sum: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for g in per_example {
        if g.len() != sum.len() {
            return Err(Error::Shape("per-example gradients have different layer counts".into()));
        }
        for (s, c) in sum.iter_mut().zip(clip(g, clip_norm)) {
            s.axpy(1.0, &c)?;
        }
    }
    if noise_mult > 0.0 {
        sum = add_noise(&sum, noise_mult * clip_norm, rng);
    }
    let b = per_example.len() as f64;
    Ok(sum.into_iter().map(|t| t.map(|v| v / b)).collect())
}
