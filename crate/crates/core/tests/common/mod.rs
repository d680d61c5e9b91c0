#![allow(dead_code)]

use fedleak_core::fl_sim::{ClientConfig, FederationPlan, LrSchedule};
use fedleak_core::ingest::{ClientShard, Dataset};
use fedleak_core::ingest::synthetic::{generate, SyntheticCorpus, SyntheticSpec};
use fedleak_core::ingest::ImageShape;
use fedleak_core::model::{self, loss_and_grads, Activation, Architecture, BatchStats, BnBuffers, BnConfig, CnnConfig, Mode, ModelState};
use fedleak_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn corpus(size: usize, per_class: usize, seed: u64) -> SyntheticCorpus {
    generate(&SyntheticSpec {
        shape: ImageShape::new(size, size, 1),
        pool_per_class: per_class,
        prior_size: 8,
        test_per_class: 4,
        seed,
    })
    .unwrap()
}

pub fn small_model(size: usize, seed: u64) -> ModelState {
    let arch = Architecture::Cnn(CnnConfig {
        in_channels: 1,
        height: size,
        width: size,
        widths: vec![4, 4],
        num_classes: 2,
        activation: Activation::Relu,
    });
    ModelState::init(arch, BnConfig::default(), seed).unwrap()
}

pub fn desk_model(seed: u64) -> ModelState {
    ModelState::init(Architecture::Cnn(CnnConfig::desk(1, 16, 2)), BnConfig::default(), seed).unwrap()
}

pub fn client(id: &str, batch_size: usize, n_train: usize, n_valid: usize) -> ClientConfig {
    ClientConfig {
        id: id.into(),
        batch_size,
        n_train,
        n_valid,
        balanced: true,
        share_from: None,
        dp: Default::default(),
    }
}

pub fn plan(clients: Vec<ClientConfig>, rounds: usize, lr: f64, seed: u64) -> FederationPlan {
    FederationPlan {
        clients,
        rounds,
        lr: LrSchedule { base: lr, ..Default::default() },
        seed,
        buffer_aggregation: Default::default(),
        warm_start: None,
    }
}

pub fn bits(ts: &[fedleak_core::Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Running buffers after applying the momentum recurrence to `trace`.
pub fn unrolled(start: &[BnBuffers], trace: &[Vec<BatchStats>], eta: f64) -> Vec<BnBuffers> {
    let mut buf: Vec<(Vec<f64>, Vec<f64>)> = start
        .iter()
        .map(|b| (b.running_mean.data().to_vec(), b.running_var.data().to_vec()))
        .collect();
    for stats in trace {
        for ((m, v), s) in buf.iter_mut().zip(stats) {
            for i in 0..m.len() {
                m[i] = (1.0 - eta) * m[i] + eta * s.mean.data()[i];
                v[i] = (1.0 - eta) * v[i] + eta * s.var.data()[i];
            }
        }
    }
    buf.into_iter()
        .map(|(m, v)| BnBuffers { running_mean: Tensor::from_vec(m), running_var: Tensor::from_vec(v) })
        .collect()
}

/// Explicit-loop FedAvg: shuffle, SGD per batch, momentum buffer update,
/// then `W + sum_k w_k dW_k` accumulated in client order.
pub fn scripted_fedavg(
    p: &FederationPlan,
    data: &Dataset,
    shards: &[ClientShard],
    init: &ModelState,
) -> ModelState {
    let n: usize = p.clients.iter().map(|c| c.n_train).sum();
    let mut global = init.clone();
    for round in 0..p.rounds {
        let lr = p.lr.at(round);
        let mut deltas = Vec::new();
        let mut bufs = Vec::new();
        for (k, c) in p.clients.iter().enumerate() {
            let mut local = global.clone();
            let mut order: Vec<usize> = (0..shards[k].train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(p.batch_order_seed(k, round)));
            for chunk in order.chunks(c.batch_size) {
                let ids: Vec<usize> = chunk.iter().map(|&i| shards[k].train[i]).collect();
                let lg = loss_and_grads(&local, &data.batch(&ids).unwrap(), Mode::Train).unwrap();
                for (w, g) in local.params.iter_mut().zip(&lg.grads) {
                    w.axpy(-lr, g).unwrap();
                }
                local.buffers = model::bn_update(&local.buffers, &lg.batch_stats, 0.1).unwrap();
            }
            deltas.push(local.params.iter().zip(&global.params).map(|(a, b)| a.zip_map(b, |x, y| x - y).unwrap()).collect::<Vec<_>>());
            bufs.push(local.buffers);
        }
        for (i, w) in global.params.iter_mut().enumerate() {
            let mut acc = Tensor::zeros(w.shape());
            for (k, c) in p.clients.iter().enumerate() {
                acc.axpy(c.n_train as f64 / n as f64, &deltas[k][i]).unwrap();
            }
            w.axpy(1.0, &acc).unwrap();
        }
        for (i, b) in global.buffers.iter_mut().enumerate() {
            let mut m = Tensor::zeros(b.running_mean.shape());
            let mut v = Tensor::zeros(b.running_var.shape());
            for (k, c) in p.clients.iter().enumerate() {
                m.axpy(c.n_train as f64 / n as f64, &bufs[k][i].running_mean).unwrap();
                v.axpy(c.n_train as f64 / n as f64, &bufs[k][i].running_var).unwrap();
            }
            *b = BnBuffers { running_mean: m, running_var: v };
        }
    }
    global
}
