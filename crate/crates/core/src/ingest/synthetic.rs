//! Seeded stand-in for a small chest-radiograph corpus.
//!
//! Every image has two dark-edged bright lobes either side of a spine with
//! per-image jitter in position, size, brightness and texture. Class 1
//! ("opacity") adds one to three bright blobs inside the lobes. Color images
//! apply a per-image tint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: ImageShape,
    /// Samples per class in the federation pool.
    pub pool_per_class: usize,
    pub prior_size: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: ImageShape::new(16, 16, 1),
            pool_per_class: 128,
            prior_size: 64,
            test_per_class: 32,
            seed: 0,
        }
    }
}

pub struct SyntheticCorpus {
    pub pool: Dataset,
    /// Held out from the pool; its mean is the attack prior.
    pub prior: Dataset,
    pub test: Dataset,
}

pub const CLASS_NAMES: [&str; 2] = ["normal", "opacity"];

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.shape.height < 4 || spec.shape.width < 4 {
        return Err(Error::config("synthetic.shape", "images must be at least 4x4"));
    }
    if spec.pool_per_class == 0 || spec.prior_size == 0 {
        return Err(Error::EmptyDataset);
    }
    let classes: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |prefix: &str, labels: Vec<usize>| {
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| Sample {
                key: format!("{prefix}_{i:05}"),
                image: render(&mut rng, spec.shape, label),
                label,
            })
            .collect();
        Dataset::new(spec.shape, classes.clone(), samples)
    };
    let interleaved = |n: usize| (0..2 * n).map(|i| i % 2).collect::<Vec<_>>();
    let pool = split("pool", interleaved(spec.pool_per_class))?;
    let prior = split("prior", (0..spec.prior_size).map(|i| i % 2).collect())?;
    let test = split("test", interleaved(spec.test_per_class))?;
    Ok(SyntheticCorpus { pool, prior, test })
}

fn render(rng: &mut ChaCha8Rng, shape: ImageShape, label: usize) -> Vec<f64> {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let mut gray = vec![0.0; shape.height * shape.width];

    let base = rng.random_range(0.02..0.12);
    let cy = h * rng.random_range(0.45..0.58);
    let gap = w * rng.random_range(0.2..0.27);
    let lobes = [
        (cy + h * rng.random_range(-0.05..0.05), w / 2.0 - gap + w * rng.random_range(-0.04..0.04)),
        (cy + h * rng.random_range(-0.05..0.05), w / 2.0 + gap + w * rng.random_range(-0.04..0.04)),
    ];
    let ry = h * rng.random_range(0.26..0.36);
    let rx = w * rng.random_range(0.12..0.18);
    let lobe_level = rng.random_range(0.35..0.6);
    let spine_level = rng.random_range(0.55..0.85);
    let spine_x = w / 2.0 + rng.random_range(-0.6..0.6);
    let mut blobs = Vec::new();
    if label == 1 {
        for _ in 0..rng.random_range(1..=3) {
            let (ly, lx) = lobes[rng.random_range(0..2)];
            blobs.push((
                ly + ry * rng.random_range(-0.6..0.6),
                lx + rx * rng.random_range(-0.6..0.6),
                rng.random_range(0.9..1.8),
                rng.random_range(0.35..0.55),
            ));
        }
    }
    let texture = Normal::new(0.0, 0.04).expect("std > 0");

    for (p, g) in gray.iter_mut().enumerate() {
        let y = (p / shape.width) as f64 + 0.5;
        let x = (p % shape.width) as f64 + 0.5;
        let mut v = base;
        for &(ly, lx) in &lobes {
            let r2 = ((y - ly) / ry).powi(2) + ((x - lx) / rx).powi(2);
            if r2 < 1.0 {
                v += lobe_level * (1.0 - r2).sqrt();
            }
        }
        v += spine_level * (-((x - spine_x) / 0.9).powi(2)).exp() * (y / h).min(1.0);
        for &(by, bx, s, a) in &blobs {
            v += a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp();
        }
        *g = v + texture.sample(rng);
    }

    if shape.channels == 1 {
        return gray.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect();
    }
    let tint = [
        rng.random_range(0.85..1.0),
        rng.random_range(0.45..0.65),
        rng.random_range(0.2..0.35),
    ];
    gray.iter()
        .flat_map(|&v| tint.map(|t| (v * t).clamp(0.0, 1.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_in_range() {
        let spec = SyntheticSpec {
            pool_per_class: 4,
            prior_size: 3,
            test_per_class: 2,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.pool.len(), 8);
        assert_eq!(a.prior.len(), 3);
        assert_eq!(a.test.len(), 4);
        assert_ne!(a.pool.samples[0].image, a.pool.samples[2].image);
        let color = generate(&SyntheticSpec {
            shape: ImageShape::new(8, 8, 3),
            ..spec
        })
        .unwrap();
        assert_eq!(color.pool.samples[0].image.len(), 192);
    }
}
