//! Leakage metrics: SSIM, RDLV, image identifiability (IIP), embeddings,
//! bootstrap intervals and a 2-D projection for plots.

pub mod tsne;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ImageShape;
use crate::model::{self, stack_hwc, ModelState};
use crate::par;

pub use tsne::{project_2d, TsneConfig};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over 'valid' Gaussian windows and channels.
///
/// Window 11x11 with sigma 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &[f64], b: &[f64], shape: ImageShape) -> Result<f64> {
    if a.len() != shape.numel() || b.len() != shape.numel() {
        return Err(Error::Shape(format!(
            "ssim inputs have {} and {} values, shape {shape:?} needs {}",
            a.len(),
            b.len(),
            shape.numel()
        )));
    }
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut size = WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(Error::Shape("ssim needs non-empty images".into()));
    }
    let k = gaussian_window(size, WINDOW_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|p| a[p * c + ch]).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b[p * c + ch]).collect();
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (ma, oh, ow) = filter_valid(&pa, h, w, &k);
        let (mb, _, _) = filter_valid(&pb, h, w, &k);
        let (saa, _, _) = filter_valid(&sq(&pa, &pa), h, w, &k);
        let (sbb, _, _) = filter_valid(&sq(&pb, &pb), h, w, &k);
        let (sab, _, _) = filter_valid(&sq(&pa, &pb), h, w, &k);
        for i in 0..oh * ow {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Relative data leakage value `(ssim_recon - ssim_prior) / ssim_prior`.
pub fn rdlv_from_ssim(ssim_recon: f64, ssim_prior: f64) -> Result<f64> {
    if ssim_prior == 0.0 || !ssim_prior.is_finite() {
        return Err(Error::Undefined(format!("RDLV with prior SSIM {ssim_prior}")));
    }
    Ok((ssim_recon - ssim_prior) / ssim_prior)
}

/// RDLV of reconstruction `recon` of target `target` against prior `prior`.
pub fn rdlv(target: &[f64], recon: &[f64], prior: &[f64], shape: ImageShape) -> Result<f64> {
    rdlv_from_ssim(ssim(target, recon, shape)?, ssim(target, prior, shape)?)
}

/// Index and SSIM of the original most similar to `recon`.
pub fn best_match(recon: &[f64], originals: &[&[f64]], shape: ImageShape) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in originals.iter().enumerate() {
        let s = ssim(o, recon, shape)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or_else(|| Error::Undefined("no originals to match".into()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Maps images (`H x W x C` rows) to feature vectors.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed_batch(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>>;

    fn embed(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[image])?.remove(0))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Globally pooled penultimate features.
    #[default]
    Pooled,
    /// Last-block activations before pooling.
    Map,
}

/// Eval-mode features of a task model checkpoint.
pub struct ModelEmbedder {
    pub state: ModelState,
    pub layer: FeatureLayer,
}

impl Embedder for ModelEmbedder {
    fn dim(&self) -> usize {
        match self.layer {
            FeatureLayer::Pooled => self.state.arch.feature_dim(),
            FeatureLayer::Map => self.state.arch.feature_map_dim(),
        }
    }

    fn embed_batch(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.state.arch.config();
        let x = stack_hwc(images, c.height, c.width, c.in_channels);
        let f = match self.layer {
            FeatureLayer::Pooled => model::features(&self.state, &x)?,
            FeatureLayer::Map => model::feature_map(&self.state, &x)?,
        };
        let d = f.shape()[1];
        Ok(f.data().chunks(d).map(<[f64]>::to_vec).collect())
    }
}

/// Mean-centered raw pixels.
pub struct PixelEmbedder {
    pub shape: ImageShape,
}

impl Embedder for PixelEmbedder {
    fn dim(&self) -> usize {
        self.shape.numel()
    }

    fn embed_batch(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|im| {
                if im.len() != self.dim() {
                    return Err(Error::Shape(format!("{} pixels, expected {}", im.len(), self.dim())));
                }
                let m = im.iter().sum::<f64>() / im.len() as f64;
                Ok(im.iter().map(|v| v - m).collect())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IipMatch {
    pub reconstruction: usize,
    /// Index into the candidate pool of the nearest image.
    pub matched: usize,
    pub cosine: f64,
    pub is_exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IipResult {
    pub score: f64,
    /// Number of reconstructions.
    pub n: usize,
    /// Unique exact matches.
    pub m: usize,
    pub matches: Vec<IipMatch>,
}

/// Image identifiability precision with a k-nearest generalization.
///
/// For each reconstruction the `k` most cosine-similar pool embeddings are
/// found; it is an exact match if any of them is flagged in `attacked`. The
/// score is the number of distinct matched attacked images over the number
/// of reconstructions. `k = 1` is the plain nearest-neighbor form.
pub fn iip(recon: &[Vec<f64>], pool: &[Vec<f64>], attacked: &[bool], k: usize) -> Result<IipResult> {
    if recon.is_empty() {
        return Err(Error::Undefined("IIP without reconstructions".into()));
    }
    if pool.is_empty() {
        return Err(Error::Undefined("IIP with an empty pool".into()));
    }
    if attacked.len() != pool.len() {
        return Err(Error::Shape("attacked flags must cover the pool".into()));
    }
    let k = k.max(1).min(pool.len());
    let matches = par::map_range(recon.len(), |r| {
        let mut sims: Vec<(usize, f64)> = pool.iter().enumerate().map(|(i, p)| (i, cosine(&recon[r], p))).collect();
        // descending similarity, ties to the lower index
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hit = sims[..k].iter().find(|(i, _)| attacked[*i]);
        let (matched, cos) = hit.copied().unwrap_or(sims[0]);
        IipMatch {
            reconstruction: r,
            matched,
            cosine: cos,
            is_exact: hit.is_some(),
        }
    });
    let mut uniq: Vec<usize> = matches.iter().filter(|m| m.is_exact).map(|m| m.matched).collect();
    uniq.sort_unstable();
    uniq.dedup();
    Ok(IipResult {
        score: uniq.len() as f64 / recon.len() as f64,
        n: recon.len(),
        m: uniq.len(),
        matches,
    })
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], trials: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Undefined("bootstrap of an empty sample".into()));
    }
    if trials == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::config("bootstrap", "trials must be >= 1 and level in (0, 1)"));
    }
    let n = values.len();
    let x0 = values[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..trials)
        .map(|_| {
            let s: f64 = (0..n).map(|_| values[rng.random_range(0..n)] - x0).sum();
            x0 + s / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let q = |p: f64| {
        let pos = p * (trials - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(trials - 1);
        means[lo] + (pos - lo as f64) * (means[hi] - means[lo])
    };
    Ok((q(alpha), q(1.0 - alpha)))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageRecord {
    pub client_id: String,
    pub round: usize,
    pub sigma0: f64,
    pub defense: String,
    /// Per reconstruction: SSIM with its best-matching original.
    pub ssim: Vec<f64>,
    /// SSIM of the same originals with the prior.
    pub ssim_prior: Vec<f64>,
    pub rdlv: Vec<f64>,
    pub rdlv_mean: f64,
    pub rdlv_lo: f64,
    pub rdlv_hi: f64,
}

impl LeakageRecord {
    /// Builds a record from reconstructions, the client's originals and the
    /// prior; each reconstruction is scored against its most similar
    /// original.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        client_id: &str,
        round: usize,
        sigma0: f64,
        defense: &str,
        recons: &[Vec<f64>],
        originals: &[&[f64]],
        prior: &[f64],
        shape: ImageShape,
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut ssim_r = Vec::with_capacity(recons.len());
        let mut ssim_p = Vec::with_capacity(recons.len());
        for r in recons {
            let (i, s) = best_match(r, originals, shape)?;
            ssim_r.push(s);
            ssim_p.push(ssim(originals[i], prior, shape)?);
        }
        Self::from_scores(client_id, round, sigma0, defense, ssim_r, ssim_p, trials, seed)
    }

    /// Builds a record from per-reconstruction SSIM pairs, e.g. pooled
    /// over several attack seeds.
    #[allow(clippy::too_many_arguments)]
    pub fn from_scores(
        client_id: &str,
        round: usize,
        sigma0: f64,
        defense: &str,
        ssim: Vec<f64>,
        ssim_prior: Vec<f64>,
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        if ssim.len() != ssim_prior.len() {
            return Err(Error::Shape("ssim and ssim_prior differ in length".into()));
        }
        let rd = ssim
            .iter()
            .zip(&ssim_prior)
            .map(|(&s, &p)| rdlv_from_ssim(s, p))
            .collect::<Result<Vec<_>>>()?;
        let (lo, hi) = bootstrap_ci(&rd, trials, 0.95, seed)?;
        let m = mean(&rd);
        Ok(LeakageRecord {
            client_id: client_id.to_string(),
            round,
            sigma0,
            defense: defense.to_string(),
            ssim,
            ssim_prior,
            rdlv: rd,
            rdlv_mean: m,
            rdlv_lo: lo.min(m),
            rdlv_hi: hi.max(m),
        })
    }
}
