use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use fedleak_core::fl_sim::store::sha256_hex;
use fedleak_core::par;
use serde_json::json;

use crate::attack::{load_record, run_attack, RunContext};
use crate::config::ExperimentConfig;
use crate::data;
use crate::error::Result;
use crate::federate::{federate_with, load_summary};
use crate::report::{compile, LeakageReport, CONFIG_FILE};

struct PendingCell {
    run: usize,
    client: String,
    round: usize,
    seed: u64,
    dir: PathBuf,
}

/// Content hash of everything that determines a federation.
fn run_key(cfg: &ExperimentConfig) -> Result<String> {
    let v = json!({
        "data": cfg.data,
        "model": cfg.model,
        "plan": cfg.plan,
        "seed": cfg.seed,
    });
    Ok(sha256_hex(&serde_json::to_vec(&v)?))
}

/// One federation per grid entry, then one attack per (client, round,
/// seed) on each, then the report. Finished runs and cells are reused, so
/// an interrupted sweep resumes where it stopped.
pub fn sweep(cfg: &ExperimentConfig, workers: usize) -> Result<LeakageReport> {
    cfg.validate_sweep()?;
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
    let data = Arc::new(data::load(&cfg.data)?);

    let mut runs = Vec::with_capacity(cfg.sweep.len());
    for dp in &cfg.sweep {
        let mut sub = cfg.clone();
        sub.plan = cfg.plan_with(dp);
        sub.sweep.clear();
        let key = run_key(&sub)?;
        let dir = out.join("runs").join(format!("{}-{}", dp.label(), &key[..12]));
        if load_summary(&dir)?.is_none() {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            log::info!("federation {}", dp.label());
            let s = federate_with(&sub, &data, &dir)?;
            log::info!(
                "{}: best round {}, test accuracy {:?}",
                s.defense,
                s.best_round,
                s.best_test_accuracy
            );
        }
        runs.push(RunContext::open_with(&dir, sub, data.clone())?);
    }

    let mut pending = Vec::new();
    for (ri, run) in runs.iter().enumerate() {
        for client in cfg.target_clients() {
            for round in cfg.target_rounds() {
                for s in 0..cfg.targets.seeds {
                    let seed = par::derive_seed(cfg.seed, &[s as u64]);
                    let mut acfg = cfg.attack.clone();
                    acfg.seed = seed;
                    let key = sha256_hex(&serde_json::to_vec(&json!({
                        "run": run.index_hash,
                        "client": client,
                        "round": round,
                        "attack": acfg,
                    }))?);
                    let dir = out.join("attacks").join(&key[..16]);
                    if load_record(&dir)?.is_none() {
                        pending.push(PendingCell {
                            run: ri,
                            client: client.clone(),
                            round,
                            seed,
                            dir,
                        });
                    }
                }
            }
        }
    }
    log::info!("{} attack cells to run", pending.len());
    let results = par::with_threads(workers.max(1), || {
        par::map(&pending, |c| {
            let mut acfg = cfg.attack.clone();
            acfg.seed = c.seed;
            let r = run_attack(&runs[c.run], &c.client, c.round, &acfg, &c.dir);
            if let Ok(rec) = &r {
                log::info!("{} {}: mean SSIM {:.3}", runs[c.run].defense, rec.id, fedleak_core::metrics::mean(&rec.ssim));
            }
            r.map(|_| ())
        })
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    compile(out)
}
