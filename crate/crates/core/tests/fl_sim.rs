mod common;

use common::*;
use fedleak_core::fl_sim::{
    aggregate, batch_order, local_train, run_federation, BufferAggregation, LocalConfig, ModelUpdate, RunReader,
    RunStore,
};
use fedleak_core::ingest::{partition, ClientShard};
use fedleak_core::model::{self, loss_and_grads, BnBuffers, Mode};
use fedleak_core::{Error, Tensor};

fn cfg(batch_size: usize, lr: f64, seed: u64) -> LocalConfig {
    LocalConfig {
        batch_size,
        lr,
        dp: Default::default(),
        batch_order_seed: seed,
        dp_seed: 0,
    }
}

fn shard(train: Vec<usize>) -> ClientShard {
    ClientShard { client_id: "c".into(), train, valid: vec![] }
}

#[test]
fn single_image_single_step_is_minus_lr_grad() {
    let data = corpus(8, 4, 0).pool;
    let g = small_model(8, 1);
    let out = local_train(&g, &data, &shard(vec![3]), &cfg(1, 0.05, 9), 0).unwrap();
    assert_eq!(out.update.n_local_iterations, 1);
    let lg = loss_and_grads(&g, &data.batch(&[3]).unwrap(), Mode::Train).unwrap();
    for (d, gr) in out.update.delta.iter().zip(&lg.grads) {
        for (a, b) in d.data().iter().zip(gr.data()) {
            assert!((a + 0.05 * b).abs() < 1e-15);
        }
    }
}

#[test]
fn two_iterations_follow_the_buffer_recurrence() {
    let data = corpus(8, 8, 1).pool;
    let g = small_model(8, 2);
    let out = local_train(&g, &data, &shard((0..8).collect()), &cfg(4, 0.1, 3), 0).unwrap();
    assert_eq!(out.update.n_local_iterations, 2);
    assert_eq!(out.trace.len(), 2);
    let expect = unrolled(&g.buffers, &out.trace, 0.1);
    for (a, b) in out.update.buffers.iter().zip(&expect) {
        for (x, y) in a.running_mean.data().iter().zip(b.running_mean.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.running_var.data().iter().zip(b.running_var.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_lr_freezes_weights_but_not_buffers() {
    let data = corpus(8, 4, 2).pool;
    let g = small_model(8, 3);
    let out = local_train(&g, &data, &shard(vec![0, 1, 2]), &cfg(2, 0.0, 1), 0).unwrap();
    assert!(out.update.delta.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    assert_ne!(out.update.buffers, g.buffers);
}

#[test]
fn replay_with_recorded_seed_is_bit_exact() {
    let data = corpus(8, 8, 3).pool;
    let g = small_model(8, 4);
    let s = shard((0..6).collect());
    let a = local_train(&g, &data, &s, &cfg(4, 0.1, 77), 5).unwrap().update;
    let b = local_train(&g, &data, &s, &cfg(a.batch_size, a.lr, a.batch_order_seed), 5).unwrap().update;
    assert_eq!(bits(&a.delta), bits(&b.delta));
    // the stored global plus the delta reproduces the local weights
    let mut local = g.clone();
    for (p, d) in local.params.iter_mut().zip(&a.delta) {
        p.axpy(1.0, d).unwrap();
    }
    let direct = fedleak_core::fl_sim::train_epoch(&g, &data, &s.train, &cfg(4, 0.1, 77)).unwrap().state;
    for (x, y) in local.params.iter().zip(&direct.params) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }
}

fn toy_update(global: &model::ModelState, fill: f64, buf: f64) -> ModelUpdate {
    ModelUpdate {
        client_id: format!("c{fill}"),
        round: 0,
        delta: global.params.iter().map(|p| Tensor::full(p.shape(), fill)).collect(),
        buffers: global
            .buffers
            .iter()
            .map(|b| BnBuffers {
                running_mean: Tensor::full(b.running_mean.shape(), buf),
                running_var: Tensor::full(b.running_var.shape(), buf + 1.0),
            })
            .collect(),
        n_train: 1,
        batch_size: 1,
        n_local_iterations: 1,
        batch_order_seed: 0,
        lr: 0.1,
        dp: Default::default(),
        noise_sigma: 0.0,
    }
}

#[test]
fn aggregation_examples() {
    let g = small_model(8, 5);
    let u = toy_update(&g, 0.25, 0.5);
    let one = aggregate(&g, &[&u], &[1.0], BufferAggregation::Weighted).unwrap();
    for ((n, p), d) in one.params.iter().zip(&g.params).zip(&u.delta) {
        assert_eq!(n, &p.zip_map(d, |a, b| a + b).unwrap());
    }
    assert_eq!(one.buffers, u.buffers);

    let neg = toy_update(&g, -0.25, 0.5);
    let cancel = aggregate(&g, &[&u, &neg], &[0.5, 0.5], BufferAggregation::KeepGlobal).unwrap();
    assert_eq!(cancel, g);

    let parts = [toy_update(&g, 1.0, 0.0), toy_update(&g, 2.0, 1.0), toy_update(&g, 3.0, 2.0)];
    let w = [1.0 / 8.0, 2.0 / 8.0, 5.0 / 8.0];
    let out = aggregate(&g, &parts.iter().collect::<Vec<_>>(), &w, BufferAggregation::Weighted).unwrap();
    let step = (1.0 * 1.0 + 2.0 * 2.0 + 5.0 * 3.0) / 8.0;
    for (n, p) in out.params.iter().zip(&g.params) {
        for (a, b) in n.data().iter().zip(p.data()) {
            assert!((a - (b + step)).abs() < 1e-12);
        }
    }
    let mean = (0.0 + 2.0 + 10.0) / 8.0;
    assert!((out.buffers[0].running_mean.data()[0] - mean).abs() < 1e-12);
}

#[test]
fn aggregation_rejects_bad_inputs() {
    let g = small_model(8, 5);
    let u = toy_update(&g, 0.1, 0.0);
    assert!(matches!(aggregate(&g, &[&u], &[0.9], BufferAggregation::Weighted), Err(Error::Aggregation(_))));
    let mut short = u.clone();
    short.delta.pop();
    assert!(matches!(aggregate(&g, &[&short], &[1.0], BufferAggregation::Weighted), Err(Error::Aggregation(_))));
    let mut later = u.clone();
    later.round = 1;
    assert!(aggregate(&g, &[&u, &later], &[0.5, 0.5], BufferAggregation::Weighted).is_err());
}

#[test]
fn frozen_single_round_keeps_initial_model_as_best() {
    let data = corpus(8, 8, 4).pool;
    let p = plan(vec![client("a", 2, 4, 4)], 1, 0.0, 1);
    let shards = partition(&data, &p.shard_specs(), 0).unwrap();
    let init = small_model(8, 6);
    let res = run_federation(&p, &data, &shards, init.clone(), None).unwrap();
    assert_eq!(res.best_round, 0);
    assert_eq!(res.best, init);
    assert!(res.logs[0].clients[0].update_norm >= 0.0);
}

#[test]
fn two_clients_three_rounds_match_scripted_oracle() {
    let data = corpus(8, 12, 5).pool;
    let p = plan(vec![client("a", 2, 4, 2), client("b", 3, 6, 2)], 3, 0.05, 11);
    let shards = partition(&data, &p.shard_specs(), 1).unwrap();
    let init = small_model(8, 7);
    let res = run_federation(&p, &data, &shards, init.clone(), None).unwrap();
    let oracle = scripted_fedavg(&p, &data, &shards, &init);
    assert_eq!(bits(&res.final_state.params), bits(&oracle.params));
    assert_eq!(res.final_state.buffers, oracle.buffers);
}

#[test]
fn same_seed_gives_identical_runs_on_disk() {
    let data = corpus(8, 8, 6).pool;
    let p = plan(vec![client("a", 2, 4, 2), client("b", 2, 4, 2)], 2, 0.05, 3);
    let shards = partition(&data, &p.shard_specs(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    let mut logs = Vec::new();
    for run in ["x", "y"] {
        let root = dir.path().join(run);
        let mut store = RunStore::create(&root, &serde_json::to_value(&p).unwrap(), &shards).unwrap();
        let res = run_federation(&p, &data, &shards, small_model(8, 8), Some(&mut store)).unwrap();
        logs.push(res.logs);
        let reader = RunReader::open(&root).unwrap();
        assert_eq!(reader.rounds(), 2);
        hashes.push(reader.index_hash().unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(logs[0], logs[1]);

    let reader = RunReader::open(&dir.path().join("x")).unwrap();
    let u = reader.update(1, "b").unwrap();
    assert_eq!(u, logs[0][1].updates[1]);
    assert_eq!(reader.global(1).unwrap(), logs[0][1].global);
    assert!(matches!(reader.update(7, "a"), Err(Error::NotFound(_))));
}

#[test]
fn batch_order_is_a_permutation() {
    let mut o = batch_order(10, 4);
    o.sort();
    assert_eq!(o, (0..10).collect::<Vec<_>>());
}
