//! Experiment configuration (TOML).
//!
//! ```toml
//! id = "desk"
//! seed = 0
//! output = "out"
//!
//! [data]
//! kind = "synthetic"
//! pool_per_class = 128
//!
//! [plan]
//! rounds = 30
//! lr = { base = 0.1 }
//! [[plan.clients]]
//! id = "hr"
//! batch_size = 1
//! n_train = 1
//! n_valid = 8
//!
//! [[sweep]]
//! mechanism = "percentile_gaussian"
//! sigma0 = 10.0
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! `FEDLEAK_SEED` replaces `seed`, which drives partitioning, model init,
//! batch order, DP noise, the attack and the bootstrap. Synthetic images
//! keep their own `data.seed`.

use std::path::{Path, PathBuf};

use fedleak_core::attack::AttackConfig;
use fedleak_core::defense::{DpConfig, Mechanism};
use fedleak_core::fl_sim::FederationPlan;
use fedleak_core::ingest::synthetic::SyntheticSpec;
use fedleak_core::ingest::ImageShape;
use fedleak_core::metrics::{FeatureLayer, TsneConfig};
use fedleak_core::model::{Activation, Architecture, BnConfig, CnnConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "FEDLEAK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSpec,
    pub plan: FederationPlan,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub targets: Targets,
    /// Defense grid for `sweep`; each entry replaces every client's DP
    /// setting for one federation.
    #[serde(default)]
    pub sweep: Vec<DpConfig>,
    #[serde(default)]
    pub metrics: MetricOptions,
}

fn default_id() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// PNG files listed in `path,label` manifests.
    Files {
        root: PathBuf,
        manifest: PathBuf,
        /// Public images whose mean is the attack prior (and the warm-start
        /// set).
        prior_manifest: PathBuf,
        #[serde(default)]
        test_manifest: Option<PathBuf>,
        shape: ImageShape,
        #[serde(default)]
        class_names: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Cnn,
    ResCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bn: BnConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Cnn,
            widths: vec![8, 8, 16, 16],
            activation: Activation::Relu,
            bn: BnConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn architecture(&self, shape: ImageShape, num_classes: usize) -> Architecture {
        let cfg = CnnConfig {
            in_channels: shape.channels,
            height: shape.height,
            width: shape.width,
            widths: self.widths.clone(),
            num_classes,
            activation: self.activation,
        };
        match self.kind {
            ModelKind::Cnn => Architecture::Cnn(cfg),
            ModelKind::ResCnn => Architecture::ResCnn(cfg),
        }
    }
}

/// Which updates a sweep attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    /// Client ids; empty means all clients.
    pub clients: Vec<String>,
    /// Rounds; empty means the last round.
    pub rounds: Vec<usize>,
    /// Attack seeds per (client, round, defense) cell.
    pub seeds: usize,
}

impl Default for Targets {
    fn default() -> Self {
        Targets {
            clients: Vec::new(),
            rounds: Vec::new(),
            seeds: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Features of the audited run's best global model.
    #[default]
    Model,
    /// Mean-centered pixels.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub bootstrap_trials: usize,
    /// Nearest neighbours considered by IIP; 1 is the plain score.
    pub iip_k: usize,
    pub embedding: EmbeddingKind,
    pub layer: FeatureLayer,
    pub tsne: TsneConfig,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            bootstrap_trials: 1000,
            iip_k: 1,
            embedding: EmbeddingKind::Model,
            layer: FeatureLayer::Pooled,
            tsne: TsneConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("file not found: {}", p.display())))
    }
}

/// Reads the seed override from the environment, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl ExperimentConfig {
    /// Parses a TOML config, resolves paths, applies `FEDLEAK_SEED` and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = std::fs::canonicalize(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output);
        if let DataSource::Files {
            root,
            manifest,
            prior_manifest,
            test_manifest,
            ..
        } = &mut self.data
        {
            resolve(base, root);
            resolve(base, manifest);
            resolve(base, prior_manifest);
            if let Some(t) = test_manifest {
                resolve(base, t);
            }
        }
    }

    /// Copies the global seed into the plan and attack sections.
    pub fn apply_seed(&mut self) {
        self.plan.seed = self.seed;
        self.attack.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CliError::config("id", "must not be empty"));
        }
        self.plan.validate()?;
        self.attack.validate()?;
        self.model.bn.validate()?;
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(CliError::config("model.widths", "need at least one block of non-zero width"));
        }
        for c in &self.plan.clients {
            c.dp.validate()?;
        }
        for (i, dp) in self.sweep.iter().enumerate() {
            dp.validate()
                .map_err(|e| CliError::config(&format!("sweep[{i}]"), e))?;
        }
        for id in &self.targets.clients {
            if !self.plan.clients.iter().any(|c| &c.id == id) {
                return Err(CliError::config("targets.clients", format!("unknown client `{id}`")));
            }
        }
        if let Some(&r) = self.targets.rounds.iter().find(|&&r| r >= self.plan.rounds) {
            return Err(CliError::config(
                "targets.rounds",
                format!("round {r} out of range (plan has {} rounds)", self.plan.rounds),
            ));
        }
        if self.targets.seeds == 0 {
            return Err(CliError::config("targets.seeds", "must be >= 1"));
        }
        if self.metrics.bootstrap_trials == 0 {
            return Err(CliError::config("metrics.bootstrap_trials", "must be >= 1"));
        }
        if self.metrics.iip_k == 0 {
            return Err(CliError::config("metrics.iip_k", "must be >= 1"));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.pool_per_class == 0 || s.prior_size == 0 {
                    return Err(CliError::config("data", "pool_per_class and prior_size must be >= 1"));
                }
            }
            DataSource::Files {
                root,
                manifest,
                prior_manifest,
                test_manifest,
                ..
            } => {
                if !root.is_dir() {
                    return Err(CliError::config("data.root", format!("directory not found: {}", root.display())));
                }
                require_file("data.manifest", manifest)?;
                require_file("data.prior_manifest", prior_manifest)?;
                if let Some(t) = test_manifest {
                    require_file("data.test_manifest", t)?;
                }
            }
        }
        Ok(())
    }

    /// Sweep validation on top of [`validate`](Self::validate).
    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(CliError::config("sweep", "grid must not be empty"));
        }
        Ok(())
    }

    /// The plan with every client's DP setting replaced by `dp`.
    pub fn plan_with(&self, dp: &DpConfig) -> FederationPlan {
        let mut plan = self.plan.clone();
        for c in &mut plan.clients {
            c.dp = dp.clone();
        }
        plan
    }

    /// Client ids the sweep attacks.
    pub fn target_clients(&self) -> Vec<String> {
        if self.targets.clients.is_empty() {
            self.plan.clients.iter().map(|c| c.id.clone()).collect()
        } else {
            self.targets.clients.clone()
        }
    }

    pub fn target_rounds(&self) -> Vec<usize> {
        if self.targets.rounds.is_empty() {
            vec![self.plan.rounds - 1]
        } else {
            self.targets.rounds.clone()
        }
    }
}

/// Noise scale shown on σ0 axes: σ0 for the Gaussian mechanism, the noise
/// multiplier for DP-SGD, 0 otherwise.
pub fn sigma0_of(dp: &DpConfig) -> f64 {
    match dp.mechanism {
        Mechanism::None => 0.0,
        Mechanism::PercentileGaussian => dp.sigma0,
        Mechanism::DpSgd => dp.noise_mult,
    }
}
