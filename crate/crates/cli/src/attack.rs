use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fedleak_core::attack::{ground_truth_slots, invert, AttackConfig, LossBreakdown};
use fedleak_core::fl_sim::store::sha256_hex;
use fedleak_core::fl_sim::RunReader;
use fedleak_core::ingest::{write_png, ClientShard};
use fedleak_core::metrics::{best_match, cosine, rdlv_from_ssim, ssim, Embedder, ModelEmbedder, PixelEmbedder};
use fedleak_core::model::ModelState;
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingKind, ExperimentConfig, MetricOptions};
use crate::data::{self, Data};
use crate::error::{CliError, Result};
use crate::federate::{defense_label, load_experiment};

pub const RESULT_FILE: &str = "result.json";
pub const LOSSES_FILE: &str = "losses.csv";

/// Everything persisted about one inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub id: String,
    pub run: PathBuf,
    pub run_index_hash: String,
    pub client_id: String,
    pub round: usize,
    pub defense: String,
    pub sigma0: f64,
    pub arm: String,
    pub seed: u64,
    pub config: AttackConfig,
    pub config_hash: String,
    /// Dataset indices of the client's training images in slot order.
    pub originals: Vec<usize>,
    /// Per reconstruction: dataset index of the most similar original.
    pub matched: Vec<usize>,
    pub ssim: Vec<f64>,
    pub ssim_prior: Vec<f64>,
    pub rdlv: Vec<f64>,
    /// Embedding cosine similarity with the matched original.
    pub cosine: Vec<f64>,
    pub labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub best: LossBreakdown,
    pub diverged: bool,
    pub restart: usize,
    /// Reconstructions, `H x W x C` in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    /// PNG file name and SHA-256 per reconstruction.
    pub files: Vec<(String, String)>,
}

/// A finished run directory plus the data it was trained on.
pub struct RunContext {
    pub dir: PathBuf,
    pub experiment: ExperimentConfig,
    pub data: Arc<Data>,
    pub reader: RunReader,
    pub shards: Vec<ClientShard>,
    pub best: ModelState,
    pub index_hash: String,
    pub defense: String,
    pub sigma0: f64,
}

impl RunContext {
    pub fn open(dir: &Path) -> Result<Self> {
        let experiment = load_experiment(dir)?;
        let data = Arc::new(data::load(&experiment.data)?);
        Self::open_with(dir, experiment, data)
    }

    pub fn open_with(dir: &Path, experiment: ExperimentConfig, data: Arc<Data>) -> Result<Self> {
        let reader = RunReader::open(dir)?;
        if reader.index.best_hash.is_none() {
            return Err(CliError::Config(format!("run {} did not finish", dir.display())));
        }
        let (defense, sigma0) = defense_label(&experiment);
        Ok(RunContext {
            dir: dir.to_path_buf(),
            shards: reader.shards()?,
            best: reader.best()?,
            index_hash: reader.index_hash()?,
            experiment,
            data,
            reader,
            defense,
            sigma0,
        })
    }

    pub fn shard(&self, client: &str) -> Result<&ClientShard> {
        self.shards
            .iter()
            .find(|s| s.client_id == client)
            .ok_or_else(|| CliError::Config(format!("unknown client `{client}`")))
    }

    pub fn embedder(&self, opts: &MetricOptions) -> Box<dyn Embedder> {
        match opts.embedding {
            EmbeddingKind::Model => Box::new(ModelEmbedder {
                state: self.best.clone(),
                layer: opts.layer,
            }),
            EmbeddingKind::Pixel => Box::new(PixelEmbedder { shape: self.data.shape() }),
        }
    }
}

pub fn attack_id(client: &str, round: usize, cfg: &AttackConfig) -> String {
    format!("{client}-r{round}-{}-s{}", cfg.arm(), cfg.seed)
}

/// Inverts the stored update of `client` at `round` and writes
/// `recon_<m>.png`, `losses.csv` and `result.json` into `dir`.
pub fn run_attack(ctx: &RunContext, client: &str, round: usize, cfg: &AttackConfig, dir: &Path) -> Result<AttackRecord> {
    let shard = ctx.shard(client)?;
    let global = ctx.reader.global(round)?;
    let update = ctx.reader.update(round, client)?;
    let round0 = ctx.reader.global(0)?;
    let data = &ctx.data;
    let shape = data.shape();
    let prior = cfg.use_prior.then_some(&data.prior);
    let res = invert(&global, &update, Some(&round0), prior, cfg)?;

    let slots = ground_truth_slots(&update, &shard.train, cfg.know_batch_order);
    let originals: Vec<&[f64]> = slots.iter().map(|&i| data.pool.samples[i].image.as_slice()).collect();
    let embedder = ctx.embedder(&ctx.experiment.metrics);
    let mut rec = AttackRecord {
        id: attack_id(client, round, cfg),
        run: ctx.dir.clone(),
        run_index_hash: ctx.index_hash.clone(),
        client_id: client.to_string(),
        round,
        defense: ctx.defense.clone(),
        sigma0: ctx.sigma0,
        arm: res.arm.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        config_hash: res.config_hash.clone(),
        originals: slots.clone(),
        matched: Vec::new(),
        ssim: Vec::new(),
        ssim_prior: Vec::new(),
        rdlv: Vec::new(),
        cosine: Vec::new(),
        labels: res.labels.clone(),
        true_labels: data.pool.labels(&slots),
        best: res.best,
        diverged: res.diverged,
        restart: res.restart,
        images: res.images.clone(),
        files: Vec::new(),
    };
    for r in &res.images {
        let (i, s) = best_match(r, &originals, shape)?;
        let sp = ssim(originals[i], &data.prior.image, shape)?;
        rec.matched.push(slots[i]);
        rec.ssim.push(s);
        rec.ssim_prior.push(sp);
        rec.rdlv.push(rdlv_from_ssim(s, sp)?);
    }
    let recon_refs: Vec<&[f64]> = res.images.iter().map(Vec::as_slice).collect();
    let matched_refs: Vec<&[f64]> = rec.matched.iter().map(|&i| data.pool.samples[i].image.as_slice()).collect();
    let er = embedder.embed_batch(&recon_refs)?;
    let eo = embedder.embed_batch(&matched_refs)?;
    rec.cosine = er.iter().zip(&eo).map(|(a, b)| cosine(a, b)).collect();

    fs::create_dir_all(dir)?;
    for (m, img) in res.images.iter().enumerate() {
        let name = format!("recon_{m}.png");
        let path = dir.join(&name);
        write_png(&path, img, shape)?;
        rec.files.push((name, sha256_hex(&fs::read(&path)?)));
    }
    let mut w = csv::Writer::from_path(dir.join(LOSSES_FILE))?;
    w.write_record(["iteration", "l_grad", "l_bn", "l_tv", "l_l2", "total"])?;
    for b in &res.trajectory {
        w.serialize((b.iteration, b.l_grad, b.l_bn, b.l_tv, b.l_l2, b.total))?;
    }
    w.flush()?;
    // written last: its presence marks a finished cell
    let tmp = dir.join("result.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&rec)?)?;
    fs::rename(tmp, dir.join(RESULT_FILE))?;
    Ok(rec)
}

pub fn load_record(dir: &Path) -> Result<Option<AttackRecord>> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}
