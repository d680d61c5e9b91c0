//! Epoch-wise gradient inversion.
//!
//! The attack replays the client's local epoch on trainable images `x̂` and
//! soft labels `ŷ`: every SGD step is differentiated with `create_graph`,
//! BN running statistics drift batch by batch exactly as on the client, and
//! the resulting weight change is matched against the intercepted update.
//! The objective is
//!
//! ```text
//! w_grad * L_grad + w_bn * L_BN + w_tv * TV(x̂) + w_l2 * ||x̂||²
//! ```
//!
//! minimized with Adam while `x̂` is projected onto `[0, 1]`.

mod optim;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, CsrBuilder, SparsePair, Var};
use crate::error::{Error, Result};
use crate::fl_sim::ModelUpdate;
use crate::ingest::{ImageShape, PriorImage};
use crate::model::{arch, maps, BnBuffers, BnNorm, ModelState};
use crate::par;
use crate::tensor::Tensor;

pub use optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub grad: f64,
    pub bn: f64,
    pub tv: f64,
    pub l2: f64,
}

/// With the default image-prior weights a ground-truth 16x16 image scores
/// below 1e-6.
impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            grad: 1.0,
            bn: 0.1,
            tv: 1e-8,
            l2: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Replay every local iteration with BN drift and match the epoch's
    /// weight change.
    #[default]
    EpochReplay,
    /// Treat the update as `n_iter` steps of one full-batch gradient.
    SingleStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Step size for the label logits.
    pub label_lr: f64,
    pub cosine_decay: bool,
    pub weights: LossWeights,
    /// Divide `L_grad` by `sum_l ||dW_l||` and `L_BN` by the norm of the
    /// target statistics so the weights are scale free.
    pub normalize: bool,
    pub use_bn_loss: bool,
    pub use_global_ckpt: bool,
    /// Initialize from the prior image; otherwise from `U(0, 1)` noise.
    pub use_prior: bool,
    pub grayscale: bool,
    pub mode: MatchMode,
    /// Place reconstructions in the client's recorded batch order.
    pub know_batch_order: bool,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 2000,
            lr: 0.01,
            label_lr: 0.1,
            cosine_decay: true,
            weights: LossWeights::default(),
            normalize: true,
            use_bn_loss: true,
            use_global_ckpt: true,
            use_prior: true,
            grayscale: false,
            mode: MatchMode::EpochReplay,
            know_batch_order: true,
            restarts: 3,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("attack.iterations", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("attack.lr", "must be > 0"));
        }
        if !(self.label_lr >= 0.0) {
            return Err(Error::config("attack.label_lr", "must be >= 0"));
        }
        let w = &self.weights;
        if [w.grad, w.bn, w.tv, w.l2].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("attack.weights", "weights must be >= 0"));
        }
        if self.restarts == 0 {
            return Err(Error::config("attack.restarts", "must be >= 1"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::fl_sim::store::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Names of the disabled components, for reports.
    pub fn arm(&self) -> String {
        let mut off = Vec::new();
        if !self.use_bn_loss {
            off.push("no_bn_loss");
        }
        if !self.use_global_ckpt {
            off.push("no_global_ckpt");
        }
        if !self.use_prior {
            off.push("no_prior");
        }
        if off.is_empty() {
            "full".into()
        } else {
            off.join("+")
        }
    }
}

/// The network the attacker differentiates through.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackNet {
    /// Weights the simulated epoch starts from; buffers are the intercepted
    /// client buffers.
    pub state: ModelState,
    /// Running statistics at the start of the client's epoch.
    pub drift_start: Vec<BnBuffers>,
}

/// Weights and epoch-start buffers from the round's global model (or, for
/// the ablation arm, from the round-0 model). Reported buffers are the
/// intercepted ones.
pub fn init_attack_network(
    global: &ModelState,
    update: &ModelUpdate,
    round0: Option<&ModelState>,
    use_global_ckpt: bool,
) -> Result<AttackNet> {
    let base = if use_global_ckpt {
        global
    } else {
        round0.ok_or_else(|| Error::config("attack.use_global_ckpt", "round-0 checkpoint required"))?
    };
    if base.arch != global.arch {
        return Err(Error::Shape("round-0 and global architectures differ".into()));
    }
    let compatible = update.delta.len() == base.params.len()
        && update.delta.iter().zip(&base.params).all(|(d, p)| d.shape() == p.shape())
        && update.buffers.len() == base.buffers.len();
    if !compatible {
        return Err(Error::Shape("update does not match the checkpoint architecture".into()));
    }
    let mut state = base.clone();
    state.buffers = update.buffers.clone();
    Ok(AttackNet {
        state,
        drift_start: base.buffers.clone(),
    })
}

/// How the client's epoch is laid out over the `M` trainable images.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub batch_size: usize,
    pub n_images: usize,
    pub lr: f64,
    pub mode: MatchMode,
    /// Normalize with the intercepted statistics instead of batch statistics.
    pub fixed_bn: bool,
}

impl EpochPlan {
    pub fn from_update(u: &ModelUpdate, mode: MatchMode, fixed_bn: bool) -> Self {
        EpochPlan {
            batch_size: u.batch_size,
            n_images: u.n_train,
            lr: u.lr,
            mode,
            fixed_bn,
        }
    }

    pub fn n_iterations(&self) -> usize {
        self.n_images.div_ceil(self.batch_size)
    }
}

pub struct Simulated {
    /// Weight change per parameter, differentiable with respect to the
    /// images and labels.
    pub delta: Vec<Var>,
    /// Running `(mean, var)` per BN layer after the simulated epoch.
    pub buffers: Vec<(Var, Var)>,
}

/// Replays the client's local epoch on `images: [M, C, H, W]` and
/// `targets: [M, K]` (rows are label distributions).
pub fn simulate_client_epoch(net: &AttackNet, images: &Var, targets: &Var, plan: &EpochPlan) -> Result<Simulated> {
    let s = net.state.arch.config();
    let m = images.shape()[0];
    if m != plan.n_images || targets.shape() != [m, s.num_classes] {
        return Err(Error::Shape(format!(
            "expected {} images and [{m}, {}] targets",
            plan.n_images, s.num_classes
        )));
    }
    // leaves that require grad, so the inner gradient can be taken
    let start: Vec<Var> = net.state.params.iter().cloned().map(Var::param).collect();
    let eps = net.state.bn.epsilon;
    let eta = net.state.bn.momentum;
    let mut buffers: Vec<(Var, Var)> = net
        .drift_start
        .iter()
        .map(|b| (Var::constant(b.running_mean.clone()), Var::constant(b.running_var.clone())))
        .collect();
    let fixed = net.state.fixed_stats();
    let norm = || if plan.fixed_bn { BnNorm::Fixed(&fixed) } else { BnNorm::Batch };

    let row = images.numel() / m;
    let k = s.num_classes;
    let img_shape = images.shape()[1..].to_vec();
    let mut params = start.clone();

    let batches: Vec<(usize, usize)> = match plan.mode {
        MatchMode::EpochReplay => (0..plan.n_iterations())
            .map(|j| (j * plan.batch_size, plan.batch_size.min(m - j * plan.batch_size)))
            .collect(),
        MatchMode::SingleStep => vec![(0, m)],
    };
    let repeat = match plan.mode {
        MatchMode::EpochReplay => 1,
        MatchMode::SingleStep => plan.n_iterations(),
    };

    for (j, &(lo, len)) in batches.iter().enumerate() {
        let (x, t) = if len == m {
            (images.clone(), targets.clone())
        } else {
            let mut xs = vec![len];
            xs.extend_from_slice(&img_shape);
            (
                images.sparse(&maps::rows(m, lo, len, row), false, &xs),
                targets.sparse(&maps::rows(m, lo, len, k), false, &[len, k]),
            )
        };
        let out = arch::build_forward(&net.state.arch, &params, &x, norm(), eps, true)
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::non_finite(format!("simulated iteration {j}: {context}")),
                other => other,
            })?;
        let loss = arch::cross_entropy(&out.logits, &t);
        if !loss.item().is_finite() {
            return Err(Error::non_finite(format!("simulated iteration {j}: loss")));
        }
        let g = grad(&loss, &params, true);
        params = params
            .iter()
            .zip(&g)
            .map(|(p, g)| p.sub(&g.scale(plan.lr * repeat as f64)))
            .collect();
        if !plan.fixed_bn {
            for _ in 0..repeat {
                buffers = buffers
                    .iter()
                    .zip(&out.batch_stats)
                    .map(|((rm, rv), (bm, bv))| {
                        (rm.scale(1.0 - eta).add(&bm.scale(eta)), rv.scale(1.0 - eta).add(&bv.scale(eta)))
                    })
                    .collect();
            }
        }
    }
    let delta = params.iter().zip(&start).map(|(p, s)| p.sub(s)).collect();
    Ok(Simulated { delta, buffers })
}

/// `sum_l ||sim_l - target_l||_2`.
pub fn grad_match_loss(simulated: &[Var], intercepted: &[Tensor]) -> Result<Var> {
    if simulated.len() != intercepted.len() {
        return Err(Error::Shape(format!(
            "{} simulated layers vs {} intercepted",
            simulated.len(),
            intercepted.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, (s, t)) in simulated.iter().zip(intercepted).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("layer {i}: {:?} vs {:?}", s.shape(), t.shape())));
        }
        let d = s.sub(&Var::constant(t.clone())).norm2();
        total = Some(match total {
            Some(acc) => acc.add(&d),
            None => d,
        });
    }
    total.ok_or_else(|| Error::Shape("no layers to match".into()))
}

/// `sum_l ||mean_l - running_mean_l||_2 + sum_l ||var_l - running_var_l||_2`.
pub fn bn_loss(stats: &[(Var, Var)], targets: &[BnBuffers]) -> Result<Var> {
    if stats.len() != targets.len() {
        return Err(Error::Shape(format!("{} BN layers vs {} targets", stats.len(), targets.len())));
    }
    let mut total = Var::constant(Tensor::scalar(0.0));
    for (i, ((m, v), t)) in stats.iter().zip(targets).enumerate() {
        if m.shape() != t.running_mean.shape() || v.shape() != t.running_var.shape() {
            return Err(Error::Shape(format!("BN layer {i} statistics")));
        }
        total = total
            .add(&m.sub(&Var::constant(t.running_mean.clone())).norm2())
            .add(&v.sub(&Var::constant(t.running_var.clone())).norm2());
    }
    Ok(total)
}

/// Horizontal and vertical neighbor differences of `[N, C, H, W]` images.
pub fn tv_map(n: usize, c: usize, h: usize, w: usize) -> Rc<SparsePair> {
    let mut b = CsrBuilder::new(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let p = base + y * w + x;
                if x + 1 < w {
                    b.push(p + 1, 1.0);
                    b.push(p, -1.0);
                    b.end_row();
                }
                if y + 1 < h {
                    b.push(p + w, 1.0);
                    b.push(p, -1.0);
                    b.end_row();
                }
            }
        }
    }
    Rc::new(SparsePair::new(b.finish()))
}

/// Anisotropic total variation: sum of absolute neighbor differences.
pub fn total_variation(images: &Var) -> Var {
    let s = images.shape();
    let map = tv_map(s[0], s[1], s[2], s[3]);
    let pairs = map.get(false).out_len();
    if pairs == 0 {
        return Var::constant(Tensor::scalar(0.0));
    }
    images.sparse(&map, false, &[pairs]).abs().sum()
}

/// `(TV(x), ||x||²)`; the caller applies the weights.
pub fn prior_loss(images: &Var) -> (Var, Var) {
    (total_variation(images), images.sum_sq())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub l_grad: f64,
    pub l_bn: f64,
    pub l_tv: f64,
    pub l_l2: f64,
    pub total: f64,
}

/// Weights actually applied after normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeights {
    pub grad: f64,
    pub bn: f64,
    pub tv: f64,
    pub l2: f64,
}

/// Everything fixed for one inversion problem.
pub struct Problem {
    pub net: AttackNet,
    pub plan: EpochPlan,
    pub target_delta: Vec<Tensor>,
    pub target_buffers: Vec<BnBuffers>,
    pub weights: EffectiveWeights,
    pub use_bn_loss: bool,
    /// Channels optimized per image (1 under the grayscale constraint).
    pub free_channels: usize,
}

impl Problem {
    pub fn new(global: &ModelState, update: &ModelUpdate, round0: Option<&ModelState>, cfg: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let net = init_attack_network(global, update, round0, cfg.use_global_ckpt)?;
        let plan = EpochPlan::from_update(update, cfg.mode, !cfg.use_bn_loss);
        let c = net.state.arch.config().in_channels;
        let w = cfg.weights;
        let (mut wg, mut wb) = (w.grad, if cfg.use_bn_loss { w.bn } else { 0.0 });
        if cfg.normalize {
            let g: f64 = update.delta.iter().map(Tensor::l2_norm).sum();
            if g > 0.0 {
                wg /= g;
            }
            let b: f64 = update
                .buffers
                .iter()
                .map(|b| b.running_mean.l2_norm() + b.running_var.l2_norm())
                .sum();
            if b > 0.0 {
                wb /= b;
            }
        }
        Ok(Problem {
            target_delta: update.delta.clone(),
            target_buffers: update.buffers.clone(),
            net,
            plan,
            weights: EffectiveWeights {
                grad: wg,
                bn: wb,
                tv: w.tv,
                l2: w.l2,
            },
            use_bn_loss: cfg.use_bn_loss,
            free_channels: if cfg.grayscale { 1 } else { c },
        })
    }

    fn image_dims(&self) -> (usize, usize, usize, usize) {
        let s = self.net.state.arch.config();
        (self.plan.n_images, s.in_channels, s.height, s.width)
    }

    /// Free images `[M, free_channels, H, W]` as network input.
    fn expand(&self, free: &Var) -> Var {
        let (m, c, h, w) = self.image_dims();
        if self.free_channels == c {
            free.clone()
        } else {
            free.sparse(&maps::repeat_channels(m, c, h * w), false, &[m, c, h, w])
        }
    }

    /// Loss graph for free images and target distributions `[M, K]`.
    pub fn loss(&self, free: &Var, targets: &Var) -> Result<(Var, LossBreakdown)> {
        let images = self.expand(free);
        let sim = simulate_client_epoch(&self.net, &images, targets, &self.plan)?;
        let l_grad = grad_match_loss(&sim.delta, &self.target_delta)?;
        let l_bn = if self.use_bn_loss {
            bn_loss(&sim.buffers, &self.target_buffers)?
        } else {
            Var::constant(Tensor::scalar(0.0))
        };
        let (l_tv, l_l2) = prior_loss(free);
        let w = &self.weights;
        let total = l_grad
            .scale(w.grad)
            .add(&l_bn.scale(w.bn))
            .add(&l_tv.scale(w.tv))
            .add(&l_l2.scale(w.l2));
        let b = LossBreakdown {
            iteration: 0,
            l_grad: l_grad.item(),
            l_bn: l_bn.item(),
            l_tv: l_tv.item(),
            l_l2: l_l2.item(),
            total: total.item(),
        };
        Ok((total, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Reconstructed images, `H x W x C` interleaved in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub shape: ImageShape,
    pub label_probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub trajectory: Vec<LossBreakdown>,
    pub best: LossBreakdown,
    pub diverged: bool,
    pub restart: usize,
    pub weights: EffectiveWeights,
    pub config_hash: String,
    pub arm: String,
}

/// Dataset indices of the client's training images in the order the attack
/// places them: slot `m` holds the image the client used at epoch position
/// `m` (or shard order when the batch order is withheld).
pub fn ground_truth_slots(update: &ModelUpdate, train: &[usize], know_batch_order: bool) -> Vec<usize> {
    if know_batch_order {
        crate::fl_sim::batch_order(train.len(), update.batch_order_seed)
            .into_iter()
            .map(|p| train[p])
            .collect()
    } else {
        train.to_vec()
    }
}

/// `[M, C, H, W]` to per-image `H x W x C` rows.
pub fn to_hwc(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = t.data();
    (0..m)
        .map(|i| {
            let mut out = Vec::with_capacity(c * h * w);
            for p in 0..h * w {
                for ch in 0..c {
                    out.push(d[(i * c + ch) * h * w + p]);
                }
            }
            out
        })
        .collect()
}

struct Run {
    free: Tensor,
    labels: Tensor,
    trajectory: Vec<LossBreakdown>,
    best: LossBreakdown,
    diverged: bool,
}

fn initial_images(problem: &Problem, prior: Option<&PriorImage>, use_prior: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (m, c, h, w) = problem.image_dims();
    let fc = problem.free_channels;
    let mut data = Vec::with_capacity(m * fc * h * w);
    match prior.filter(|_| use_prior) {
        Some(p) => {
            if p.shape != ImageShape::new(h, w, c) {
                return Err(Error::Shape(format!("prior {:?} vs model input {h}x{w}x{c}", p.shape)));
            }
            for _ in 0..m {
                for ch in 0..fc {
                    for px in 0..h * w {
                        let v = if fc == c {
                            p.image[px * c + ch]
                        } else {
                            (0..c).map(|cc| p.image[px * c + cc]).sum::<f64>() / c as f64
                        };
                        data.push(v);
                    }
                }
            }
        }
        None => data.extend((0..m * fc * h * w).map(|_| rng.random::<f64>())),
    }
    Tensor::new(vec![m, fc, h, w], data)
}

fn run_once(problem: &Problem, cfg: &AttackConfig, prior: Option<&PriorImage>, seed: u64) -> Result<Run> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = problem.net.state.arch.config().num_classes;
    let m = problem.plan.n_images;
    let mut free = initial_images(problem, prior, cfg.use_prior, &mut rng)?;
    let mut labels = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.random::<f64>()).collect())?;

    let mut adam_x = Adam::new(&[free.len()]);
    let mut adam_y = Adam::new(&[labels.len()]);
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(LossBreakdown, Tensor, Tensor)> = None;
    let mut bad = 0;
    let mut diverged = false;
    for it in 0..cfg.iterations {
        let xv = Var::param(free.clone());
        let yv = Var::param(labels.clone());
        let evaluated = problem.loss(&xv, &softmax_rows(&yv));
        let (total, mut b) = match evaluated {
            Ok(v) if v.1.total.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                bad += 1;
                if bad >= 3 {
                    diverged = true;
                    break;
                }
                // retreat to the best state and keep going
                if let Some((_, bx, by)) = &best {
                    free = bx.clone();
                    labels = by.clone();
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        bad = 0;
        b.iteration = it;
        trajectory.push(b);
        if best.as_ref().is_none_or(|(bb, _, _)| b.total < bb.total) {
            best = Some((b, free.clone(), labels.clone()));
        }
        let g = grad(&total, &[xv, yv], false);
        let decay = if cfg.cosine_decay {
            0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos())
        } else {
            1.0
        };
        adam_x.step(cfg.lr * decay, &mut [free.data_mut()], &[g[0].value().data()]);
        adam_y.step(cfg.label_lr * decay, &mut [labels.data_mut()], &[g[1].value().data()]);
        for v in free.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    // score the final iterate too
    if !diverged {
        if let Ok((_, mut b)) = problem.loss(&Var::constant(free.clone()), &softmax_rows(&Var::constant(labels.clone()))) {
            b.iteration = cfg.iterations;
            if b.total.is_finite() && best.as_ref().is_none_or(|(bb, _, _)| b.total < bb.total) {
                best = Some((b, free.clone(), labels.clone()));
            }
        }
    }
    let (best, free, labels) = match best {
        Some(b) => b,
        None => {
            let b = LossBreakdown {
                total: f64::NAN,
                ..Default::default()
            };
            (b, free, labels)
        }
    };
    Ok(Run {
        free,
        labels,
        trajectory,
        best,
        diverged,
    })
}

/// Row-wise softmax of `[M, K]` label logits.
pub fn softmax_rows(logits: &Var) -> Var {
    let (m, k) = (logits.shape()[0], logits.shape()[1]);
    let shift: Vec<f64> = logits
        .value()
        .data()
        .chunks(k)
        .flat_map(|r| {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat_n(mx, k)
        })
        .collect();
    let e = logits.sub(&Var::constant(Tensor::new(vec![m, k], shift).expect("shape"))).exp();
    e.div(&e.reduce_mid(1, m, k).expand_mid(1, k, &[m, k]))
}

/// Runs `cfg.restarts` seeded inversions and returns the one with the lowest
/// best total loss.
pub fn invert(
    global: &ModelState,
    update: &ModelUpdate,
    round0: Option<&ModelState>,
    prior: Option<&PriorImage>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    let problem = Problem::new(global, update, round0, cfg)?;
    let mut chosen: Option<(usize, Run)> = None;
    for r in 0..cfg.restarts {
        let run = run_once(&problem, cfg, prior, par::derive_seed(cfg.seed, &[r as u64]))?;
        let better = match &chosen {
            None => true,
            Some((_, c)) => run.best.total < c.best.total || c.best.total.is_nan(),
        };
        if better {
            chosen = Some((r, run));
        }
    }
    let (restart, run) = chosen.expect("at least one restart");
    let (m, c, h, w) = problem.image_dims();
    let images = if problem.free_channels == c {
        run.free.clone()
    } else {
        let _g = crate::autodiff::no_grad();
        problem.expand(&Var::constant(run.free.clone())).value().clone()
    };
    let k = run.labels.shape()[1];
    let label_probs: Vec<Vec<f64>> = {
        let _g = crate::autodiff::no_grad();
        softmax_rows(&Var::constant(run.labels.clone())).value().data().chunks(k).map(<[f64]>::to_vec).collect()
    };
    debug_assert_eq!(label_probs.len(), m);
    Ok(ReconstructionResult {
        images: to_hwc(&images),
        shape: ImageShape::new(h, w, c),
        labels: label_probs.iter().map(|p| crate::model::argmax(p)).collect(),
        label_probs,
        trajectory: run.trajectory,
        best: run.best,
        diverged: run.diverged,
        restart,
        weights: problem.weights,
        config_hash: cfg.hash(),
        arm: cfg.arm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_tv_is_four_per_channel() {
        let x = Var::constant(Tensor::new(vec![1, 2, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(total_variation(&x).item(), 8.0);
        let flat = Var::constant(Tensor::full(&[1, 1, 3, 3], 0.7));
        assert_eq!(total_variation(&flat).item(), 0.0);
    }

    #[test]
    fn grad_match_sums_layer_norms() {
        let sim = vec![
            Var::constant(Tensor::from_vec(vec![3.0, 0.0])),
            Var::constant(Tensor::from_vec(vec![0.0, 4.0, 0.0])),
        ];
        let tgt = vec![Tensor::zeros(&[2]), Tensor::zeros(&[3])];
        assert_eq!(grad_match_loss(&sim, &tgt).unwrap().item(), 7.0);
        assert!(grad_match_loss(&sim[..1], &tgt).is_err());
    }

    #[test]
    fn bn_loss_sums_mean_and_var_terms() {
        let stats = vec![(
            Var::constant(Tensor::from_vec(vec![1.0, 0.0])),
            Var::constant(Tensor::from_vec(vec![1.0, 3.0])),
        )];
        let t = vec![BnBuffers {
            running_mean: Tensor::zeros(&[2]),
            running_var: Tensor::from_vec(vec![1.0, 1.0]),
        }];
        assert_eq!(bn_loss(&stats, &t).unwrap().item(), 3.0);
    }
}
