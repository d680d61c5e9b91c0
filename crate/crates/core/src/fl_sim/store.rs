//! Run directory persistence.
//!
//! ```text
//! <root>/plan.json  shards.json  index.json  best.ckpt  final.ckpt
//! <root>/round_<t>/global.ckpt  client_<k>.update  log.json
//! ```
//!
//! `index.json` lists the SHA-256 of every file written, so two runs of the
//! same plan can be compared by hashing the index alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClientRoundStats, ModelUpdate, RoundLog};
use crate::error::{Error, Result};
use crate::ingest::ClientShard;
use crate::model::checkpoint::{named_arrays, split_arrays, Container};
use crate::model::{Architecture, ModelState};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: usize,
    /// Relative path to file hash.
    pub files: Vec<(String, String)>,
    pub mean_valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub rounds: Vec<RoundEntry>,
    pub best_round: Option<usize>,
    pub final_hash: Option<String>,
    pub best_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RoundFile {
    round: usize,
    clients: Vec<ClientRoundStats>,
    mean_valid_accuracy: Option<f64>,
    updates: Vec<ModelUpdate>,
}

pub struct RunStore {
    root: PathBuf,
    index: RunIndex,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_hashed(root: &Path, rel: &str, bytes: &[u8]) -> Result<(String, String)> {
    let path = root.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::Load {
        path: path.clone(),
        reason: format!("write failed: {e}"),
    })?;
    Ok((rel.to_string(), sha256_hex(bytes)))
}

/// File-name-safe form of a client id.
pub fn client_file(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("client_{safe}.update")
}

pub fn round_dir(root: &Path, round: usize) -> PathBuf {
    root.join(format!("round_{round}"))
}

impl RunStore {
    /// Creates `root` (which must not hold a previous run) and records the
    /// plan snapshot and shards.
    pub fn create(root: &Path, plan_snapshot: &serde_json::Value, shards: &[ClientShard]) -> Result<Self> {
        if root.join("index.json").exists() {
            return Err(Error::config("output", format!("{} already holds a run", root.display())));
        }
        fs::create_dir_all(root)?;
        fs::write(root.join("plan.json"), serde_json::to_vec_pretty(plan_snapshot)?)?;
        fs::write(root.join("shards.json"), serde_json::to_vec_pretty(shards)?)?;
        Ok(RunStore {
            root: root.to_path_buf(),
            index: RunIndex::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_round(&mut self, log: &RoundLog) -> Result<()> {
        let dir = round_dir(&self.root, log.round);
        fs::create_dir_all(&dir)?;
        let arch = &log.global.arch;
        let prefix = format!("round_{}", log.round);
        let mut files = vec![write_hashed(
            &self.root,
            &format!("{prefix}/global.ckpt"),
            &log.global.to_container().encode()?,
        )?];
        for u in &log.updates {
            files.push(write_hashed(
                &self.root,
                &format!("{prefix}/{}", client_file(&u.client_id)),
                &encode_update(arch, u)?,
            )?);
        }
        let round_file = RoundFile {
            round: log.round,
            clients: log.clients.clone(),
            mean_valid_accuracy: log.mean_valid_accuracy,
            updates: log.updates.clone(),
        };
        files.push(write_hashed(
            &self.root,
            &format!("{prefix}/log.json"),
            &serde_json::to_vec_pretty(&round_file)?,
        )?);
        self.index.rounds.push(RoundEntry {
            round: log.round,
            files,
            mean_valid_accuracy: log.mean_valid_accuracy,
        });
        self.write_index()
    }

    pub fn finish(&mut self, final_state: &ModelState, best_round: usize, best: &ModelState) -> Result<()> {
        let (_, fh) = write_hashed(&self.root, "final.ckpt", &final_state.to_container().encode()?)?;
        let (_, bh) = write_hashed(&self.root, "best.ckpt", &best.to_container().encode()?)?;
        self.index.final_hash = Some(fh);
        self.index.best_hash = Some(bh);
        self.index.best_round = Some(best_round);
        self.write_index()
    }

    fn write_index(&self) -> Result<()> {
        fs::write(self.root.join("index.json"), serde_json::to_vec_pretty(&self.index)?)?;
        Ok(())
    }
}

pub fn encode_update(arch: &Architecture, u: &ModelUpdate) -> Result<Vec<u8>> {
    Container {
        meta: serde_json::to_value(u)?,
        arrays: named_arrays(arch, &u.delta, &u.buffers),
    }
    .encode()
}

pub fn decode_update(arch: &Architecture, bytes: &[u8]) -> Result<ModelUpdate> {
    let c = Container::decode(bytes)?;
    let mut u: ModelUpdate = serde_json::from_value(c.meta.clone())?;
    let (delta, buffers) = split_arrays(arch, &c)?;
    u.delta = delta;
    u.buffers = buffers;
    Ok(u)
}

/// Read access to a finished (or partial) run directory.
pub struct RunReader {
    pub root: PathBuf,
    pub index: RunIndex,
}

impl RunReader {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let bytes = fs::read(&path).map_err(|_| Error::NotFound(format!("run index {}", path.display())))?;
        Ok(RunReader {
            root: root.to_path_buf(),
            index: serde_json::from_slice(&bytes)?,
        })
    }

    pub fn rounds(&self) -> usize {
        self.index.rounds.len()
    }

    fn check_round(&self, round: usize) -> Result<PathBuf> {
        if !self.index.rounds.iter().any(|r| r.round == round) {
            return Err(Error::NotFound(format!(
                "round {round} (run has {} rounds)",
                self.index.rounds.len()
            )));
        }
        Ok(round_dir(&self.root, round))
    }

    pub fn global(&self, round: usize) -> Result<ModelState> {
        ModelState::load(&self.check_round(round)?.join("global.ckpt"))
    }

    pub fn update(&self, round: usize, client: &str) -> Result<ModelUpdate> {
        let dir = self.check_round(round)?;
        let global = self.global(round)?;
        let path = dir.join(client_file(client));
        let bytes = fs::read(&path).map_err(|_| Error::NotFound(format!("update of client `{client}` in round {round}")))?;
        decode_update(&global.arch, &bytes)
    }

    pub fn best(&self) -> Result<ModelState> {
        ModelState::load(&self.root.join("best.ckpt"))
    }

    pub fn final_state(&self) -> Result<ModelState> {
        ModelState::load(&self.root.join("final.ckpt"))
    }

    pub fn shards(&self) -> Result<Vec<ClientShard>> {
        Ok(serde_json::from_slice(&fs::read(self.root.join("shards.json"))?)?)
    }

    pub fn plan_snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_slice(&fs::read(self.root.join("plan.json"))?)?)
    }

    pub fn index_hash(&self) -> Result<String> {
        Ok(sha256_hex(&fs::read(self.root.join("index.json"))?))
    }
}
