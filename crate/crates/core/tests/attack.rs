mod common;

use common::*;
use fedleak_core::attack::{
    ground_truth_slots, init_attack_network, invert, simulate_client_epoch, AttackConfig, EpochPlan, LossWeights,
    MatchMode, Problem,
};
use fedleak_core::autodiff::{grad, Var};
use fedleak_core::fl_sim::{local_train, LocalConfig};
use fedleak_core::ingest::{ClientShard, Dataset};
use fedleak_core::model::{arch::one_hot, loss_and_grads, Activation, Architecture, BnConfig, CnnConfig, ModelState, Mode};
use fedleak_core::Tensor;

fn lcfg(batch_size: usize, lr: f64, seed: u64) -> LocalConfig {
    LocalConfig { batch_size, lr, dp: Default::default(), batch_order_seed: seed, dp_seed: 0 }
}

fn truth(data: &Dataset, slots: &[usize], grayscale: bool) -> (Var, Var) {
    let mut x = data.images(slots);
    if grayscale {
        let s = x.shape().to_vec();
        x = Tensor::new(vec![s[0], 1, s[2], s[3]], x.data()[..s[0] * s[2] * s[3]].to_vec()).unwrap();
    }
    (Var::param(x), Var::param(one_hot(&data.labels(slots), data.num_classes())))
}

fn matching_only() -> AttackConfig {
    AttackConfig { weights: LossWeights { grad: 1.0, bn: 1.0, tv: 0.0, l2: 0.0 }, ..Default::default() }
}

#[test]
fn ground_truth_is_a_fixed_point_of_the_matching_loss() {
    let data = corpus(16, 8, 0).pool;
    let global = desk_model(3);
    for (n, bs) in [(1, 1), (4, 2), (5, 2)] {
        let shard = ClientShard { client_id: "c".into(), train: (0..n).collect(), valid: vec![] };
        let u = local_train(&global, &data, &shard, &lcfg(bs, 0.05, 17), 4).unwrap().update;
        let problem = Problem::new(&global, &u, None, &matching_only()).unwrap();
        let (x, y) = truth(&data, &ground_truth_slots(&u, &shard.train, true), false);
        let (_, b) = problem.loss(&x, &y).unwrap();
        assert!(b.total < 1e-6, "n={n} bs={bs}: {b:?}");
        assert!(b.l_grad < 1e-9 && b.l_bn < 1e-9, "{b:?}");
    }
}

#[test]
fn one_step_replay_equals_minus_lr_gradient() {
    let data = corpus(8, 4, 1).pool;
    let global = small_model(8, 2);
    let shard = ClientShard { client_id: "c".into(), train: vec![2], valid: vec![] };
    let u = local_train(&global, &data, &shard, &lcfg(1, 0.1, 0), 0).unwrap().update;
    let net = init_attack_network(&global, &u, None, true).unwrap();
    let (x, y) = truth(&data, &[2], false);
    let sim = simulate_client_epoch(&net, &x, &y, &EpochPlan::from_update(&u, MatchMode::EpochReplay, false)).unwrap();
    let g = loss_and_grads(&global, &data.batch(&[2]).unwrap(), Mode::Train).unwrap().grads;
    for (d, g) in sim.delta.iter().zip(&g) {
        for (a, b) in d.value().data().iter().zip(g.data()) {
            assert!((a + 0.1 * b).abs() < 1e-14);
        }
    }
}

#[test]
fn frozen_weights_still_drift_buffers_in_replay() {
    let data = corpus(8, 4, 2).pool;
    let global = small_model(8, 3);
    let shard = ClientShard { client_id: "c".into(), train: vec![0, 1, 2, 3], valid: vec![] };
    let out = local_train(&global, &data, &shard, &lcfg(2, 0.0, 5), 0).unwrap();
    let u = out.update;
    let net = init_attack_network(&global, &u, None, true).unwrap();
    let (x, y) = truth(&data, &ground_truth_slots(&u, &shard.train, true), false);
    let sim = simulate_client_epoch(&net, &x, &y, &EpochPlan::from_update(&u, MatchMode::EpochReplay, false)).unwrap();
    assert!(sim.delta.iter().all(|d| d.value().data().iter().all(|v| *v == 0.0)));
    let eta = 0.1;
    let mut m = global.buffers[0].running_mean.data().to_vec();
    for stats in &out.trace {
        for (mi, s) in m.iter_mut().zip(stats[0].mean.data()) {
            *mi = (1.0 - eta) * *mi + eta * s;
        }
    }
    for (a, b) in sim.buffers[0].0.value().data().iter().zip(&m) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn init_copies_checkpoint_and_update_buffers() {
    let data = corpus(8, 4, 3).pool;
    let global = small_model(8, 4);
    let round0 = small_model(8, 99);
    let shard = ClientShard { client_id: "c".into(), train: vec![0, 1], valid: vec![] };
    let u = local_train(&global, &data, &shard, &lcfg(2, 0.1, 0), 0).unwrap().update;
    let net = init_attack_network(&global, &u, Some(&round0), true).unwrap();
    assert_eq!(bits(&net.state.params), bits(&global.params));
    assert_eq!(net.state.buffers, u.buffers);
    let ablated = init_attack_network(&global, &u, Some(&round0), false).unwrap();
    assert_eq!(ablated.state.params, round0.params);
    assert_eq!(ablated.state.buffers, u.buffers);
    let other = ModelState::init(
        Architecture::Cnn(CnnConfig { in_channels: 1, height: 8, width: 8, widths: vec![4], num_classes: 2, activation: Activation::Relu }),
        BnConfig::default(),
        0,
    )
    .unwrap();
    assert!(init_attack_network(&other, &u, None, true).is_err());
}

fn fd_check(global: &ModelState, data: &Dataset, cfg: &AttackConfig, grayscale: bool) {
    let shard = ClientShard { client_id: "c".into(), train: vec![1], valid: vec![] };
    let u = local_train(global, data, &shard, &lcfg(1, 0.05, 0), 0).unwrap().update;
    let problem = Problem::new(global, &u, None, cfg).unwrap();
    let prior_like: Vec<f64> = {
        let (x, _) = truth(data, &[5], grayscale);
        x.value().data().iter().map(|v| 0.2 + 0.6 * v).collect()
    };
    let shape = if grayscale { vec![1, 1, 8, 8] } else { vec![1, global.arch.config().in_channels, 8, 8] };
    let x0 = Tensor::new(shape.clone(), prior_like).unwrap();
    let y = Var::constant(Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap());
    let xv = Var::param(x0.clone());
    let (total, _) = problem.loss(&xv, &y).unwrap();
    let g = grad(&total, &[xv], false)[0].value().clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..x0.len()).step_by(3) {
        let eval = |d: f64| {
            let mut x = x0.clone();
            x.data_mut()[i] += d;
            problem.loss(&Var::constant(x), &y).unwrap().1.total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

fn three_block(channels: usize) -> ModelState {
    let arch = Architecture::Cnn(CnnConfig { in_channels: channels, height: 8, width: 8, widths: vec![4, 4, 8], num_classes: 2, activation: Activation::Relu });
    ModelState::init(arch, BnConfig::default(), 5).unwrap()
}

#[test]
fn input_gradient_matches_finite_differences() {
    let data = corpus(8, 4, 4).pool;
    let cfg = AttackConfig { weights: LossWeights { grad: 1.0, bn: 0.5, tv: 1e-2, l2: 1e-2 }, ..Default::default() };
    fd_check(&three_block(1), &data, &cfg, false);
}

#[test]
fn grayscale_color_input_gradient_matches_finite_differences() {
    let data = fedleak_core::ingest::synthetic::generate(&fedleak_core::ingest::synthetic::SyntheticSpec {
        shape: fedleak_core::ingest::ImageShape::new(8, 8, 3),
        pool_per_class: 4,
        prior_size: 1,
        test_per_class: 1,
        seed: 0,
    })
    .unwrap()
    .pool;
    let cfg = AttackConfig { grayscale: true, ..Default::default() };
    fd_check(&three_block(3), &data, &cfg, true);
}

#[test]
fn inversion_is_deterministic_and_clamped() {
    let c = corpus(8, 4, 5);
    let global = small_model(8, 6);
    let shard = ClientShard { client_id: "c".into(), train: vec![0, 3], valid: vec![] };
    let u = local_train(&global, &c.pool, &shard, &lcfg(1, 0.1, 2), 0).unwrap().update;
    let prior = fedleak_core::ingest::compute_prior(&c.prior, c.pool.shape, "prior").unwrap();
    let cfg = AttackConfig { iterations: 25, restarts: 2, lr: 0.05, ..Default::default() };
    let a = invert(&global, &u, None, Some(&prior), &cfg).unwrap();
    let b = invert(&global, &u, None, Some(&prior), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.images.len(), 2);
    assert!(a.images.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.best.total <= a.trajectory[0].total);
    for t in &a.trajectory {
        let w = a.weights;
        let sum = w.grad * t.l_grad + w.bn * t.l_bn + w.tv * t.l_tv + w.l2 * t.l_l2;
        assert!((sum - t.total).abs() <= 1e-12 * t.total.abs().max(1.0));
    }
}

#[test]
fn single_step_mode_runs() {
    let c = corpus(8, 4, 6);
    let global = small_model(8, 7);
    let shard = ClientShard { client_id: "c".into(), train: vec![0, 1, 2], valid: vec![] };
    let u = local_train(&global, &c.pool, &shard, &lcfg(2, 0.1, 2), 0).unwrap().update;
    let cfg = AttackConfig { iterations: 3, mode: MatchMode::SingleStep, use_prior: false, ..Default::default() };
    let r = invert(&global, &u, None, None, &cfg).unwrap();
    assert_eq!(r.images.len(), 3);
}
