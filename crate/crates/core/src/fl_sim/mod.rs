//! FedAvg simulation with BN-updating clients.
//!
//! Each round every client trains one epoch of plain SGD in train mode from
//! the broadcast global state, the server intercepts the resulting
//! [`ModelUpdate`] and aggregates all updates with weights `n_k / n`.

pub mod store;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{self, DpConfig, Mechanism};
use crate::error::{Error, Result};
use crate::ingest::{ClientShard, Dataset, ShardSpec};
use crate::model::{self, BatchStats, BnBuffers, Mode, ModelState};
use crate::par;
use crate::tensor::{global_l2_norm, Tensor};

pub use store::{RunReader, RunStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub id: String,
    pub batch_size: usize,
    pub n_train: usize,
    #[serde(default)]
    pub n_valid: usize,
    #[serde(default = "yes")]
    pub balanced: bool,
    #[serde(default)]
    pub share_from: Option<String>,
    #[serde(default)]
    pub dp: DpConfig,
}

fn yes() -> bool {
    true
}

impl ClientConfig {
    pub fn shard_spec(&self) -> ShardSpec {
        ShardSpec {
            client_id: self.id.clone(),
            n_train: self.n_train,
            n_valid: self.n_valid,
            balanced: self.balanced,
            share_from: self.share_from.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.01,
            decay: 0.1,
            every: 40,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, round: usize) -> f64 {
        if self.every == 0 {
            return self.base;
        }
        self.base * self.decay.powi((round / self.every) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferAggregation {
    /// Same `n_k / n` weighted average as the weights.
    #[default]
    Weighted,
    /// Server keeps its previous running statistics.
    KeepGlobal,
}

/// Centralized pretraining on a split disjoint from the client pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationPlan {
    pub clients: Vec<ClientConfig>,
    pub rounds: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub buffer_aggregation: BufferAggregation,
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
}

impl FederationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::config("plan.clients", "at least one client is required"));
        }
        if self.rounds == 0 {
            return Err(Error::config("plan.rounds", "must be >= 1"));
        }
        if !(self.lr.base >= 0.0) || !self.lr.base.is_finite() {
            return Err(Error::config("plan.lr.base", "must be a finite value >= 0"));
        }
        for c in &self.clients {
            if c.batch_size == 0 {
                return Err(Error::config(format!("plan.clients.{}.batch_size", c.id), "must be >= 1"));
            }
            if c.n_train == 0 {
                return Err(Error::config(format!("plan.clients.{}.n_train", c.id), "must be >= 1"));
            }
            c.dp.validate()
                .map_err(|e| Error::config(format!("plan.clients.{}.dp", c.id), e.to_string()))?;
        }
        Ok(())
    }

    pub fn shard_specs(&self) -> Vec<ShardSpec> {
        self.clients.iter().map(ClientConfig::shard_spec).collect()
    }

    /// `n_k / n` per client.
    pub fn weights(&self) -> Vec<f64> {
        let n: usize = self.clients.iter().map(|c| c.n_train).sum();
        self.clients.iter().map(|c| c.n_train as f64 / n as f64).collect()
    }

    pub fn client_index(&self, id: &str) -> Result<usize> {
        self.clients
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::NotFound(format!("client `{id}`")))
    }

    pub fn batch_order_seed(&self, client: usize, round: usize) -> u64 {
        par::derive_seed(self.seed, &[1, client as u64, round as u64])
    }

    pub fn dp_seed(&self, client: usize, round: usize) -> u64 {
        par::derive_seed(self.seed, &[2, client as u64, round as u64, self.clients[client].dp.seed])
    }
}

/// What the server intercepts from one client in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub client_id: String,
    pub round: usize,
    /// `W_local_final - W_global`, one tensor per trainable parameter.
    #[serde(skip)]
    pub delta: Vec<Tensor>,
    /// Running statistics after the local epoch.
    #[serde(skip)]
    pub buffers: Vec<BnBuffers>,
    pub n_train: usize,
    pub batch_size: usize,
    pub n_local_iterations: usize,
    pub batch_order_seed: u64,
    pub lr: f64,
    pub dp: DpConfig,
    /// Noise scale actually applied by the percentile mechanism.
    pub noise_sigma: f64,
}

impl ModelUpdate {
    pub fn l2_norm(&self) -> f64 {
        global_l2_norm(&self.delta)
    }
}

/// Position permutation for one local epoch; batch `j` holds positions
/// `order[j*b .. (j+1)*b]`.
pub fn batch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn n_iterations(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub dp: DpConfig,
    pub batch_order_seed: u64,
    pub dp_seed: u64,
}

/// Updated local state after one epoch plus the per-iteration batch
/// statistics that drove the BN buffer updates.
pub struct Epoch {
    pub state: ModelState,
    pub trace: Vec<Vec<BatchStats>>,
}

/// One epoch of SGD without momentum in train mode. BN buffers follow the
/// momentum update after every iteration.
pub fn train_epoch(start: &ModelState, data: &Dataset, indices: &[usize], cfg: &LocalConfig) -> Result<Epoch> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = batch_order(indices.len(), cfg.batch_order_seed);
    let mut dp_rng = ChaCha8Rng::seed_from_u64(cfg.dp_seed);
    let mut state = start.clone();
    let mut trace = Vec::new();
    for (it, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let ids: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
        let batch = data.batch(&ids)?;
        let ctx = |e: Error| match e {
            Error::NonFinite { context } => Error::non_finite(format!("iteration {it}: {context}")),
            other => other,
        };
        let (grads, stats) = if cfg.dp.mechanism == Mechanism::DpSgd {
            let (per, stats) = model::per_example_grads(&state, &batch).map_err(ctx)?;
            let g = defense::dp_sgd_step(&per, cfg.dp.clip_norm, cfg.dp.noise_mult, &mut dp_rng)?;
            (g, stats)
        } else {
            let out = model::loss_and_grads(&state, &batch, Mode::Train).map_err(ctx)?;
            (out.grads, out.batch_stats)
        };
        for (p, g) in state.params.iter_mut().zip(&grads) {
            p.axpy(-cfg.lr, g)?;
        }
        state.buffers = model::bn_update(&state.buffers, &stats, state.bn.momentum)?;
        trace.push(stats);
    }
    Ok(Epoch { state, trace })
}

pub struct LocalOutcome {
    pub update: ModelUpdate,
    pub trace: Vec<Vec<BatchStats>>,
}

/// Trains one client for one epoch from the global state and packages the
/// (optionally noised) update.
pub fn local_train(
    global: &ModelState,
    data: &Dataset,
    shard: &ClientShard,
    cfg: &LocalConfig,
    round: usize,
) -> Result<LocalOutcome> {
    let epoch = train_epoch(global, data, &shard.train, cfg).map_err(|e| match e {
        Error::NonFinite { context } => {
            Error::non_finite(format!("client `{}` round {round}, {context}", shard.client_id))
        }
        other => other,
    })?;
    let mut delta: Vec<Tensor> = epoch
        .state
        .params
        .iter()
        .zip(&global.params)
        .map(|(l, g)| l.zip_map(g, |a, b| a - b))
        .collect::<Result<_>>()?;
    let mut buffers = epoch.state.buffers;
    let mut noise_sigma = 0.0;
    if cfg.dp.mechanism == Mechanism::PercentileGaussian {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.dp_seed);
        let noised = defense::percentile_gaussian(&delta, cfg.dp.sigma0, cfg.dp.q, cfg.dp.percentile, &mut rng)?;
        delta = noised.tensors;
        noise_sigma = noised.sigma;
        if cfg.dp.noise_buffers && noise_sigma > 0.0 {
            buffers = buffers
                .iter()
                .map(|b| {
                    let [m, v]: [Tensor; 2] = defense::add_noise(
                        &[b.running_mean.clone(), b.running_var.clone()],
                        noise_sigma,
                        &mut rng,
                    )
                    .try_into()
                    .expect("two tensors");
                    BnBuffers {
                        running_mean: m,
                        running_var: v.map(|x| x.max(0.0)),
                    }
                })
                .collect();
        }
    }
    Ok(LocalOutcome {
        update: ModelUpdate {
            client_id: shard.client_id.clone(),
            round,
            delta,
            buffers,
            n_train: shard.train.len(),
            batch_size: cfg.batch_size,
            n_local_iterations: n_iterations(shard.train.len(), cfg.batch_size),
            batch_order_seed: cfg.batch_order_seed,
            lr: cfg.lr,
            dp: cfg.dp.clone(),
            noise_sigma,
        },
        trace: epoch.trace,
    })
}

/// `W + sum_k w_k * dW_k`, accumulated in client order. Buffers are either
/// the weighted average of client buffers or kept from `global`.
pub fn aggregate(
    global: &ModelState,
    updates: &[&ModelUpdate],
    weights: &[f64],
    buffers: BufferAggregation,
) -> Result<ModelState> {
    if updates.is_empty() || updates.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} updates with {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Aggregation(format!("weights sum to {total}, not 1")));
    }
    let round = updates[0].round;
    for u in updates {
        if u.round != round {
            return Err(Error::Aggregation(format!(
                "update from `{}` is for round {}, expected {round}",
                u.client_id, u.round
            )));
        }
        let same_layers = u.delta.len() == global.params.len()
            && u.delta.iter().zip(&global.params).all(|(d, p)| d.shape() == p.shape())
            && u.buffers.len() == global.buffers.len();
        if !same_layers {
            return Err(Error::Aggregation(format!(
                "update from `{}` does not match the global layer set",
                u.client_id
            )));
        }
    }
    let mut next = global.clone();
    for (i, p) in next.params.iter_mut().enumerate() {
        let mut acc = Tensor::zeros(p.shape());
        for (u, &w) in updates.iter().zip(weights) {
            acc.axpy(w, &u.delta[i])?;
        }
        p.axpy(1.0, &acc)?;
    }
    if buffers == BufferAggregation::Weighted {
        for (i, b) in next.buffers.iter_mut().enumerate() {
            let mut mean = Tensor::zeros(b.running_mean.shape());
            let mut var = Tensor::zeros(b.running_var.shape());
            for (u, &w) in updates.iter().zip(weights) {
                mean.axpy(w, &u.buffers[i].running_mean)?;
                var.axpy(w, &u.buffers[i].running_var)?;
            }
            *b = BnBuffers {
                running_mean: mean,
                running_var: var,
            };
        }
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: String,
    /// Accuracy of the round's global model on this client's validation set.
    pub valid_accuracy: Option<f64>,
    /// l2 norm of the transmitted update.
    pub update_norm: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Global state broadcast at the start of the round.
    pub global: ModelState,
    pub updates: Vec<ModelUpdate>,
    pub clients: Vec<ClientRoundStats>,
    pub mean_valid_accuracy: Option<f64>,
}

pub struct FederationResult {
    pub logs: Vec<RoundLog>,
    pub final_state: ModelState,
    pub best_round: usize,
    pub best: ModelState,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Centralized SGD epochs on `indices` before federation starts.
pub fn warm_start(state: &ModelState, data: &Dataset, indices: &[usize], ws: &WarmStart, seed: u64) -> Result<ModelState> {
    let mut s = state.clone();
    for e in 0..ws.epochs {
        let cfg = LocalConfig {
            batch_size: ws.batch_size,
            lr: ws.lr,
            dp: DpConfig::default(),
            batch_order_seed: par::derive_seed(seed, &[3, e as u64]),
            dp_seed: 0,
        };
        s = train_epoch(&s, data, indices, &cfg)?.state;
    }
    Ok(s)
}

/// Runs `plan.rounds` rounds of FedAvg from `init`.
///
/// Clients of a round train in parallel; aggregation and persistence are
/// sequential. The best global model is the round's broadcast state with
/// the highest mean validation accuracy (ties go to the earliest round).
pub fn run_federation(
    plan: &FederationPlan,
    data: &Dataset,
    shards: &[ClientShard],
    init: ModelState,
    mut store: Option<&mut RunStore>,
) -> Result<FederationResult> {
    plan.validate()?;
    if shards.len() != plan.clients.len() {
        return Err(Error::config("plan.clients", "one shard per client is required"));
    }
    for (c, s) in plan.clients.iter().zip(shards) {
        if c.id != s.client_id || c.n_train != s.train.len() {
            return Err(Error::config(
                format!("plan.clients.{}", c.id),
                "shard does not match the client entry",
            ));
        }
    }
    let weights = plan.weights();
    let mut global = init;
    let mut logs = Vec::with_capacity(plan.rounds);
    let mut best: Option<(usize, f64)> = None;
    for round in 0..plan.rounds {
        let lr = plan.lr.at(round);
        let cells: Vec<usize> = (0..plan.clients.len()).collect();
        let results = par::map(&cells, |&k| -> Result<(LocalOutcome, Option<f64>)> {
            let c = &plan.clients[k];
            let cfg = LocalConfig {
                batch_size: c.batch_size,
                lr,
                dp: c.dp.clone(),
                batch_order_seed: plan.batch_order_seed(k, round),
                dp_seed: plan.dp_seed(k, round),
            };
            let acc = if shards[k].valid.is_empty() {
                None
            } else {
                let v = &shards[k].valid;
                Some(model::accuracy(&global, &data.images(v), &data.labels(v))?)
            };
            Ok((local_train(&global, data, &shards[k], &cfg, round)?, acc))
        });
        let mut updates = Vec::with_capacity(cells.len());
        let mut clients = Vec::with_capacity(cells.len());
        for r in results {
            let (out, acc) = r?;
            clients.push(ClientRoundStats {
                client_id: out.update.client_id.clone(),
                valid_accuracy: acc,
                update_norm: out.update.l2_norm(),
                noise_sigma: out.update.noise_sigma,
            });
            updates.push(out.update);
        }
        let refs: Vec<&ModelUpdate> = updates.iter().collect();
        let next = aggregate(&global, &refs, &weights, plan.buffer_aggregation)?;
        let mean_acc = mean(clients.iter().filter_map(|c| c.valid_accuracy));
        let score = mean_acc.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((round, score));
        }
        let log = RoundLog {
            round,
            global,
            updates,
            clients,
            mean_valid_accuracy: mean_acc,
        };
        if let Some(s) = store.as_deref_mut() {
            s.write_round(&log)?;
        }
        log::info!(
            "round {round}: lr {lr:.3e}, mean validation accuracy {}",
            mean_acc.map_or("n/a".into(), |a| format!("{a:.3}"))
        );
        logs.push(log);
        global = next;
    }
    let best_round = best.expect("at least one round").0;
    let best_state = logs[best_round].global.clone();
    if let Some(s) = store {
        s.finish(&global, best_round, &best_state)?;
    }
    Ok(FederationResult {
        logs,
        final_state: global,
        best_round,
        best: best_state,
    })
}
