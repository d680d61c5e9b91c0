//! Rayon fan-out against the sequential fallback on the two data-parallel
//! workloads: per-client local training and per-reconstruction IIP search.
//!
//! Build with `--no-default-features` to time the fallback inside
//! `run_federation` itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedleak_core::fl_sim::{local_train, run_federation, ClientConfig, FederationPlan, LocalConfig, LrSchedule};
use fedleak_core::ingest::synthetic::{generate, SyntheticSpec};
use fedleak_core::ingest::{partition, ImageShape};
use fedleak_core::metrics::cosine;
use fedleak_core::model::{Architecture, BnConfig, CnnConfig, ModelState};
use fedleak_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn client(id: &str, batch_size: usize, n_train: usize) -> ClientConfig {
    ClientConfig { id: id.into(), batch_size, n_train, n_valid: 4, balanced: true, share_from: None, dp: Default::default() }
}

fn local_training(c: &mut Criterion) {
    let corpus = generate(&SyntheticSpec { shape: ImageShape::new(16, 16, 1), pool_per_class: 64, ..Default::default() }).unwrap();
    let plan = FederationPlan {
        clients: vec![client("a", 4, 16), client("b", 4, 16), client("c", 8, 32), client("d", 8, 32)],
        rounds: 1,
        lr: LrSchedule { base: 0.05, ..Default::default() },
        seed: 0,
        buffer_aggregation: Default::default(),
        warm_start: None,
    };
    let shards = partition(&corpus.pool, &plan.shard_specs(), 0).unwrap();
    let global = ModelState::init(Architecture::Cnn(CnnConfig::desk(1, 16, 2)), BnConfig::default(), 0).unwrap();
    let cfgs: Vec<(usize, LocalConfig)> = plan
        .clients
        .iter()
        .enumerate()
        .map(|(k, cl)| {
            (k, LocalConfig { batch_size: cl.batch_size, lr: 0.05, dp: Default::default(), batch_order_seed: k as u64, dp_seed: 0 })
        })
        .collect();
    let train = |(k, cfg): &(usize, LocalConfig)| local_train(&global, &corpus.pool, &shards[*k], cfg, 0).unwrap().update;

    let mut g = c.benchmark_group("local_training_4_clients");
    g.sample_size(10);
    g.bench_function("rayon", |b| b.iter(|| black_box(par::map(&cfgs, train))));
    g.bench_function("sequential", |b| b.iter(|| black_box(cfgs.iter().map(train).collect::<Vec<_>>())));
    g.bench_function("run_federation", |b| {
        b.iter(|| black_box(run_federation(&plan, &corpus.pool, &shards, global.clone(), None).unwrap().final_state))
    });
    g.finish();
}

fn nearest_neighbours(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let pool = vecs(2000);
    let mut g = c.benchmark_group("iip_search");
    for n in [8usize, 64] {
        let recon = vecs(n);
        let nearest = |r: &Vec<f64>| {
            pool.iter()
                .enumerate()
                .map(|(i, p)| (i, cosine(r, p)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
        };
        g.bench_with_input(BenchmarkId::new("rayon", n), &recon, |b, recon| b.iter(|| black_box(par::map(recon, nearest))));
        g.bench_with_input(BenchmarkId::new("sequential", n), &recon, |b, recon| {
            b.iter(|| black_box(recon.iter().map(nearest).collect::<Vec<_>>()))
        });
    }
    g.finish();
}

criterion_group!(benches, local_training, nearest_neighbours);
criterion_main!(benches);
