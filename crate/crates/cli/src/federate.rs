use std::fs;
use std::path::Path;

use fedleak_core::defense::DpConfig;
use fedleak_core::fl_sim::{run_federation, warm_start, RunReader, RunStore};
use fedleak_core::ingest::partition;
use fedleak_core::model::{accuracy, ModelState};
use serde::{Deserialize, Serialize};

use crate::config::{sigma0_of, ExperimentConfig};
use crate::data::{self, Data};
use crate::error::{CliError, Result};

/// Config snapshot stored in every run directory.
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub defense: String,
    pub sigma0: f64,
    pub rounds: usize,
    pub best_round: usize,
    pub best_valid_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub index_hash: String,
}

/// DP setting shared by all clients, if there is one.
pub fn common_dp(cfg: &ExperimentConfig) -> Option<&DpConfig> {
    let first = &cfg.plan.clients.first()?.dp;
    cfg.plan.clients.iter().all(|c| &c.dp == first).then_some(first)
}

pub fn defense_label(cfg: &ExperimentConfig) -> (String, f64) {
    match common_dp(cfg) {
        Some(dp) => (dp.label(), sigma0_of(dp)),
        None => ("mixed".into(), 0.0),
    }
}

fn test_accuracy(data: &Data, state: &ModelState) -> Result<Option<f64>> {
    let Some(test) = &data.test else {
        return Ok(None);
    };
    let idx: Vec<usize> = (0..test.len()).collect();
    Ok(Some(accuracy(state, &test.images(&idx), &test.labels(&idx))?))
}

/// Trains the configured federation and persists every round to `run_dir`.
pub fn federate(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    let data = data::load(&cfg.data)?;
    federate_with(cfg, &data, run_dir)
}

pub fn federate_with(cfg: &ExperimentConfig, data: &Data, run_dir: &Path) -> Result<RunSummary> {
    let plan = &cfg.plan;
    let shards = partition(&data.pool, &plan.shard_specs(), plan.seed)?;
    let arch = cfg.model.architecture(data.shape(), data.pool.num_classes());
    let mut init = ModelState::init(arch, cfg.model.bn, cfg.seed)?;
    if let Some(ws) = &plan.warm_start {
        let idx: Vec<usize> = (0..data.public.len()).collect();
        init = warm_start(&init, &data.public, &idx, ws, cfg.seed)?;
    }
    let mut store = RunStore::create(run_dir, &serde_json::to_value(plan)?, &shards)?;
    fs::write(run_dir.join(EXPERIMENT_FILE), serde_json::to_vec_pretty(cfg)?)?;
    let fed = run_federation(plan, &data.pool, &shards, init, Some(&mut store))?;

    let (defense, sigma0) = defense_label(cfg);
    let summary = RunSummary {
        experiment: cfg.id.clone(),
        defense,
        sigma0,
        rounds: plan.rounds,
        best_round: fed.best_round,
        best_valid_accuracy: fed.logs[fed.best_round].mean_valid_accuracy,
        best_test_accuracy: test_accuracy(data, &fed.best)?,
        final_test_accuracy: test_accuracy(data, &fed.final_state)?,
        index_hash: RunReader::open(run_dir)?.index_hash()?,
    };
    fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Config snapshot of a finished run.
pub fn load_experiment(run_dir: &Path) -> Result<ExperimentConfig> {
    let path = run_dir.join(EXPERIMENT_FILE);
    let bytes = fs::read(&path).map_err(|_| CliError::Config(format!("not a run directory: {} is missing", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_summary(run_dir: &Path) -> Result<Option<RunSummary>> {
    let path = run_dir.join(SUMMARY_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}
