//! Report assembly from persisted runs and attack cells.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fedleak_core::metrics::{iip, mean, project_2d, IipResult, LeakageRecord};
use fedleak_core::par;
use serde::{Deserialize, Serialize};

use crate::attack::{load_record, AttackRecord, RunContext};
use crate::config::ExperimentConfig;
use crate::data::{self, Data};
use crate::error::{CliError, Result};
use crate::federate::{load_experiment, load_summary, RunSummary};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    #[serde(flatten)]
    pub leakage: LeakageRecord,
    pub arm: String,
    pub mean_ssim: f64,
    pub mean_ssim_prior: f64,
    /// Mean IIP score over the cells of this record.
    pub iip: f64,
    pub cosine: f64,
    /// Attack directories (relative to the output root) pooled here.
    pub attacks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IipEntry {
    pub client_id: String,
    pub defense: String,
    pub sigma0: f64,
    pub arm: String,
    /// Mean over cells (rounds and seeds).
    pub score: f64,
    pub cells: Vec<(String, IipResult)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub defense: String,
    pub sigma0: f64,
    pub run: String,
    pub best_round: usize,
    pub best_valid_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub x: f64,
    pub y: f64,
    pub client_id: String,
    pub sigma0: f64,
    pub is_original: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub experiment: String,
    pub records: Vec<ReportRecord>,
    pub iip: Vec<IipEntry>,
    pub accuracy: Vec<AccuracyEntry>,
    /// t-SNE of reconstructions and the originals they were scored against,
    /// embedded with the first run's best model.
    pub embedding: Vec<EmbeddingPoint>,
    pub config: ExperimentConfig,
}

struct Cell {
    rel: String,
    run: usize,
    rec: AttackRecord,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Finished runs under `<out>/runs`, ordered by (σ0, defense label).
fn finished_runs(out: &Path, data: &Arc<Data>) -> Result<Vec<(RunSummary, RunContext)>> {
    let mut runs = Vec::new();
    for dir in sorted_dirs(&out.join("runs"))? {
        if let Some(s) = load_summary(&dir)? {
            let exp = load_experiment(&dir)?;
            runs.push((s, RunContext::open_with(&dir, exp, data.clone())?));
        }
    }
    runs.sort_by(|a, b| a.0.sigma0.total_cmp(&b.0.sigma0).then_with(|| a.0.defense.cmp(&b.0.defense)));
    Ok(runs)
}

/// Rebuilds `report.json` and `metrics.csv` under `out` from what is on
/// disk. Cells whose run is missing are ignored.
pub fn compile(out: &Path) -> Result<LeakageReport> {
    let cfg_path = out.join(CONFIG_FILE);
    let config: ExperimentConfig = serde_json::from_slice(
        &fs::read(&cfg_path).map_err(|_| CliError::Config(format!("no sweep output in {}", out.display())))?,
    )?;
    let data = Arc::new(data::load(&config.data)?);
    let runs = finished_runs(out, &data)?;
    if runs.is_empty() {
        return Err(CliError::Config(format!("no finished runs under {}", out.join("runs").display())));
    }
    let opts = &config.metrics;

    let mut cells = Vec::new();
    for dir in sorted_dirs(&out.join("attacks"))? {
        let Some(rec) = load_record(&dir)? else { continue };
        if let Some(run) = runs.iter().position(|(_, c)| c.index_hash == rec.run_index_hash) {
            cells.push(Cell {
                rel: rel(out, &dir),
                run,
                rec,
            });
        }
    }
    cells.sort_by(|a, b| {
        (a.run, &a.rec.client_id, a.rec.round, &a.rec.arm, a.rec.seed).cmp(&(
            b.run,
            &b.rec.client_id,
            b.rec.round,
            &b.rec.arm,
            b.rec.seed,
        ))
    });

    // pool embeddings per run: every client's train and validation images
    let pools: Vec<(Vec<usize>, Vec<Vec<f64>>)> = runs
        .iter()
        .map(|(_, ctx)| {
            let mut idx: Vec<usize> = ctx.shards.iter().flat_map(|s| s.train.iter().chain(&s.valid).copied()).collect();
            idx.sort_unstable();
            idx.dedup();
            let imgs: Vec<&[f64]> = idx.iter().map(|&i| data.pool.samples[i].image.as_slice()).collect();
            Ok((idx.clone(), ctx.embedder(opts).embed_batch(&imgs)?))
        })
        .collect::<Result<_>>()?;

    let cell_iip: Vec<Result<IipResult>> = par::map(&cells, |c| {
        let (_, ctx) = &runs[c.run];
        let (idx, pe) = &pools[c.run];
        let train = &ctx.shard(&c.rec.client_id)?.train;
        let attacked: Vec<bool> = idx.iter().map(|i| train.contains(i)).collect();
        let recon: Vec<&[f64]> = c.rec.images.iter().map(Vec::as_slice).collect();
        let re = ctx.embedder(opts).embed_batch(&recon)?;
        Ok(iip(&re, pe, &attacked, opts.iip_k)?)
    });
    let cell_iip: Vec<IipResult> = cell_iip.into_iter().collect::<Result<_>>()?;

    let mut groups: BTreeMap<(usize, String, usize, String), Vec<usize>> = BTreeMap::new();
    let mut iip_groups: BTreeMap<(usize, String, String), Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        groups
            .entry((c.run, c.rec.client_id.clone(), c.rec.round, c.rec.arm.clone()))
            .or_default()
            .push(i);
        iip_groups
            .entry((c.run, c.rec.client_id.clone(), c.rec.arm.clone()))
            .or_default()
            .push(i);
    }

    let mut records = Vec::new();
    for ((run, client, round, arm), members) in &groups {
        let summary = &runs[*run].0;
        let ssim: Vec<f64> = members.iter().flat_map(|&i| cells[i].rec.ssim.iter().copied()).collect();
        let ssim_prior: Vec<f64> = members.iter().flat_map(|&i| cells[i].rec.ssim_prior.iter().copied()).collect();
        let cos: Vec<f64> = members.iter().flat_map(|&i| cells[i].rec.cosine.iter().copied()).collect();
        let seed = par::derive_seed(config.seed, &[*run as u64, par::hash_str(client), *round as u64]);
        let leakage = LeakageRecord::from_scores(
            client,
            *round,
            summary.sigma0,
            &summary.defense,
            ssim.clone(),
            ssim_prior.clone(),
            opts.bootstrap_trials,
            seed,
        )?;
        records.push(ReportRecord {
            leakage,
            arm: arm.clone(),
            mean_ssim: mean(&ssim),
            mean_ssim_prior: mean(&ssim_prior),
            iip: mean(&members.iter().map(|&i| cell_iip[i].score).collect::<Vec<_>>()),
            cosine: mean(&cos),
            attacks: members.iter().map(|&i| cells[i].rel.clone()).collect(),
        });
    }

    let iip_entries = iip_groups
        .iter()
        .map(|((run, client, arm), members)| IipEntry {
            client_id: client.clone(),
            defense: runs[*run].0.defense.clone(),
            sigma0: runs[*run].0.sigma0,
            arm: arm.clone(),
            score: mean(&members.iter().map(|&i| cell_iip[i].score).collect::<Vec<_>>()),
            cells: members.iter().map(|&i| (cells[i].rel.clone(), cell_iip[i].clone())).collect(),
        })
        .collect();

    let accuracy = runs
        .iter()
        .map(|(s, ctx)| AccuracyEntry {
            defense: s.defense.clone(),
            sigma0: s.sigma0,
            run: rel(out, &ctx.dir),
            best_round: s.best_round,
            best_valid_accuracy: s.best_valid_accuracy,
            best_test_accuracy: s.best_test_accuracy,
            final_test_accuracy: s.final_test_accuracy,
        })
        .collect();

    let embedding = embedding_points(&runs[0].1, &runs, &cells, &config)?;

    let report = LeakageReport {
        experiment: config.id.clone(),
        records,
        iip: iip_entries,
        accuracy,
        embedding,
        config,
    };
    write_report(out, &report)?;
    Ok(report)
}

fn embedding_points(
    reference: &RunContext,
    runs: &[(RunSummary, RunContext)],
    cells: &[Cell],
    config: &ExperimentConfig,
) -> Result<Vec<EmbeddingPoint>> {
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let data = &reference.data;
    let mut originals: BTreeMap<usize, String> = BTreeMap::new();
    let mut images: Vec<&[f64]> = Vec::new();
    let mut meta = Vec::new();
    for c in cells {
        for (img, m) in c.rec.images.iter().zip(&c.rec.matched) {
            images.push(img);
            meta.push((c.rec.client_id.clone(), runs[c.run].0.sigma0, false));
            originals.entry(*m).or_insert_with(|| c.rec.client_id.clone());
        }
    }
    for (&i, client) in &originals {
        images.push(&data.pool.samples[i].image);
        meta.push((client.clone(), 0.0, true));
    }
    let emb = reference.embedder(&config.metrics).embed_batch(&images)?;
    let xy = project_2d(&emb, &config.metrics.tsne)?;
    Ok(xy
        .into_iter()
        .zip(meta)
        .map(|([x, y], (client_id, sigma0, is_original))| EmbeddingPoint {
            x,
            y,
            client_id,
            sigma0,
            is_original,
        })
        .collect())
}

pub fn write_report(out: &Path, report: &LeakageReport) -> Result<()> {
    fs::write(out.join(REPORT_FILE), serde_json::to_vec_pretty(report)?)?;
    let mut w = csv::Writer::from_path(out.join(METRICS_FILE))?;
    w.write_record([
        "client", "round", "defense", "sigma0", "arm", "n", "ssim", "ssim_prior", "rdlv", "rdlv_lo", "rdlv_hi", "iip",
        "cosine",
    ])?;
    for r in &report.records {
        let l = &r.leakage;
        w.serialize((
            &l.client_id,
            l.round,
            &l.defense,
            l.sigma0,
            &r.arm,
            l.rdlv.len(),
            r.mean_ssim,
            r.mean_ssim_prior,
            l.rdlv_mean,
            l.rdlv_lo,
            l.rdlv_hi,
            r.iip,
            r.cosine,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<LeakageReport> {
    let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let bytes = fs::read(&path).map_err(|_| CliError::Config(format!("report not found: {}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Experiment config saved by `sweep`, if any.
pub fn load_config_snapshot(out: &Path) -> Result<ExperimentConfig> {
    Ok(serde_json::from_slice(&fs::read(out.join(CONFIG_FILE))?)?)
}
