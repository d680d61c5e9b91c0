//! Image-classification datasets, prior images and client shards.
//!
//! Images are stored as interleaved `H x W x C` rows of `f64` in `[0, 1]`.
//! Shards refer to samples by their index in the dataset, so a dataset can be
//! shared read-only between workers.

pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stack_hwc, Batch};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Path relative to the dataset root, or a generated key.
    pub key: String,
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks shapes, value range and labels.
    pub fn new(shape: ImageShape, class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::config("channels", "must be 1 or 3"));
        }
        for s in &samples {
            if s.image.len() != shape.numel() {
                return Err(Error::Shape(format!(
                    "{}: {} values, expected {}",
                    s.key,
                    s.image.len(),
                    shape.numel()
                )));
            }
            if s.label >= class_names.len() {
                return Err(Error::Manifest(format!(
                    "{}: label {} outside {} classes",
                    s.key,
                    s.label,
                    class_names.len()
                )));
            }
            if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape(format!("{}: values outside [0, 1]", s.key)));
            }
        }
        Ok(Dataset {
            shape,
            class_names,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// `[N, C, H, W]` images for the given samples.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.samples[i].image.as_slice()).collect();
        stack_hwc(&rows, self.shape.height, self.shape.width, self.shape.channels)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(self.images(indices), self.labels(indices), self.num_classes())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            shape: self.shape,
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub shape: ImageShape,
    /// Known classes. Empty means: infer from the manifest, sorted.
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
}

/// Reads a `path,label` CSV manifest and the PNG files it names.
///
/// Paths are relative to `root`. Labels may be class names or indices into
/// `opts.class_names`. Samples are returned sorted by path.
pub fn load_dataset(root: &Path, manifest: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Load {
            path: manifest.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut rows: Vec<ManifestRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Manifest(e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    rows.sort_by(|a, b| a.path.cmp(&b.path));

    let class_names = if opts.class_names.is_empty() {
        rows.iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        opts.class_names.clone()
    };

    let samples = rows
        .iter()
        .map(|row| {
            let label = resolve_label(&row.label, &class_names)
                .ok_or_else(|| Error::Manifest(format!("{}: unknown label `{}`", row.path, row.label)))?;
            let image = read_png(&root.join(&row.path), opts.shape)?;
            Ok(Sample {
                key: row.path.clone(),
                image,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(opts.shape, class_names, samples)
}

fn resolve_label(label: &str, classes: &[String]) -> Option<usize> {
    if let Some(i) = classes.iter().position(|c| c == label) {
        return Some(i);
    }
    label.parse::<usize>().ok().filter(|&i| i < classes.len())
}

/// Decodes an image, converts it to the requested channel count and resizes
/// it (bilinear) when its size differs.
pub fn read_png(path: &Path, shape: ImageShape) -> Result<Vec<f64>> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    let img = image::load_from_memory(&bytes).map_err(|e| load_err(e.to_string()))?;
    let (w, h) = (shape.width as u32, shape.height as u32);
    let raw: Vec<u8> = match shape.channels {
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (w, h) {
                g = image::imageops::resize(&g, w, h, FilterType::Triangle);
            }
            g.into_raw()
        }
        3 => {
            let mut c = img.to_rgb8();
            if c.dimensions() != (w, h) {
                c = image::imageops::resize(&c, w, h, FilterType::Triangle);
            }
            c.into_raw()
        }
        n => return Err(Error::config("channels", format!("unsupported channel count {n}"))),
    };
    Ok(raw.into_iter().map(|v| f64::from(v) / 255.0).collect())
}

/// Writes an `H x W x C` image as an 8-bit PNG. Values are clamped to
/// `[0, 1]` and rounded.
pub fn write_png(path: &Path, image: &[f64], shape: ImageShape) -> Result<()> {
    let raw: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (shape.width as u32, shape.height as u32);
    let img = match shape.channels {
        1 => GrayImage::from_raw(w, h, raw).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w, h, raw).map(DynamicImage::ImageRgb8),
        _ => None,
    }
    .ok_or_else(|| Error::Shape(format!("cannot encode {} values as {shape:?}", image.len())))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes every sample as `<dir>/<key>.png` plus a `manifest.csv`, returning
/// the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["path", "label"])?;
    for s in &dataset.samples {
        let file = format!("{}.png", s.key.trim_end_matches(".png"));
        write_png(&dir.join(&file), &s.image, dataset.shape)?;
        w.write_record([file.as_str(), dataset.class_names[s.label].as_str()])?;
    }
    w.flush()?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorImage {
    pub image: Vec<f64>,
    pub shape: ImageShape,
    pub source: String,
}

/// Pixel-wise mean of the prior corpus.
pub fn compute_prior(prior: &Dataset, task_shape: ImageShape, source: &str) -> Result<PriorImage> {
    if prior.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if prior.shape != task_shape {
        return Err(Error::Shape(format!(
            "prior images are {:?}, task images are {task_shape:?}",
            prior.shape
        )));
    }
    let mut sum = vec![0.0; task_shape.numel()];
    for s in &prior.samples {
        for (a, v) in sum.iter_mut().zip(&s.image) {
            *a += v;
        }
    }
    let n = prior.len() as f64;
    Ok(PriorImage {
        image: sum.into_iter().map(|v| v / n).collect(),
        shape: task_shape,
        source: source.to_string(),
    })
}

/// Size and composition of one client's shard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub client_id: String,
    pub n_train: usize,
    pub n_valid: usize,
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Draw the training images (and validation set) from this client's
    /// shard instead of the pool.
    #[serde(default)]
    pub share_from: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: String,
    /// Dataset indices, in shard order.
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Splits `dataset` into client shards.
///
/// Owning clients draw disjoint train and validation samples from a seeded
/// permutation of the pool. A sharing client takes the first `n_train`
/// images of its sharer's (shuffled) training set and the sharer's
/// validation set.
pub fn partition(dataset: &Dataset, specs: &[ShardSpec], seed: u64) -> Result<Vec<ClientShard>> {
    let mut ids = HashSet::new();
    for s in specs {
        if !ids.insert(s.client_id.as_str()) {
            return Err(Error::Partition(format!("duplicate client `{}`", s.client_id)));
        }
        if s.n_train == 0 {
            return Err(Error::Partition(format!("client `{}` has no training images", s.client_id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut used = vec![false; dataset.len()];
    let k = dataset.num_classes();

    let mut draw = |n: usize, balanced: bool, rot: usize, who: &str| -> Result<Vec<usize>> {
        let quota: Vec<usize> = if balanced {
            (0..k).map(|c| n / k + usize::from((c + k - rot % k) % k < n % k)).collect()
        } else {
            Vec::new()
        };
        let mut taken = vec![0usize; k];
        let mut out = Vec::with_capacity(n);
        for &i in &order {
            if out.len() == n {
                break;
            }
            if used[i] {
                continue;
            }
            let c = dataset.samples[i].label;
            if balanced && taken[c] == quota[c] {
                continue;
            }
            used[i] = true;
            taken[c] += 1;
            out.push(i);
        }
        if out.len() < n {
            return Err(Error::Partition(format!(
                "not enough samples for client `{who}`: wanted {n}{}, found {}",
                if balanced { " (class balanced)" } else { "" },
                out.len()
            )));
        }
        Ok(out)
    };

    let mut shards: Vec<Option<ClientShard>> = vec![None; specs.len()];
    for (ci, s) in specs.iter().enumerate() {
        if s.share_from.is_some() {
            continue;
        }
        let train = draw(s.n_train, s.balanced, ci, &s.client_id)?;
        let valid = draw(s.n_valid, s.balanced, ci, &s.client_id)?;
        shards[ci] = Some(ClientShard {
            client_id: s.client_id.clone(),
            train,
            valid,
        });
    }
    for (ci, s) in specs.iter().enumerate() {
        let Some(from) = &s.share_from else { continue };
        let sharer = specs
            .iter()
            .position(|o| &o.client_id == from)
            .and_then(|j| shards[j].as_ref())
            .ok_or_else(|| Error::Partition(format!("`{}` shares from unknown or sharing client `{from}`", s.client_id)))?;
        if s.n_train > sharer.train.len() {
            return Err(Error::Partition(format!(
                "`{}` wants {} images but `{from}` has {}",
                s.client_id,
                s.n_train,
                sharer.train.len()
            )));
        }
        let train = sharer.train[..s.n_train].to_vec();
        let valid = sharer.valid.clone();
        shards[ci] = Some(ClientShard {
            client_id: s.client_id.clone(),
            train,
            valid,
        });
    }
    Ok(shards.into_iter().map(|s| s.expect("every shard assigned")).collect())
}
