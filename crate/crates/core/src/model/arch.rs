//! Network architectures and graph construction.

use serde::{Deserialize, Serialize};

use super::maps;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolutional classifier built from `conv3x3 -> BN -> ReLU -> pool`
/// blocks, one block per entry of `widths`. Every block but the last halves
/// the spatial size; the last is followed by global average pooling and a
/// linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: &Var) -> Var {
        match self {
            Activation::Relu => x.relu(),
            Activation::Softplus => x.softplus(),
        }
    }
}

impl CnnConfig {
    pub fn desk(in_channels: usize, size: usize, num_classes: usize) -> Self {
        CnnConfig {
            in_channels,
            height: size,
            width: size,
            widths: vec![8, 8, 16, 16],
            num_classes,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Plain stacked blocks.
    Cnn(CnnConfig),
    /// Each block is `conv-BN-ReLU-conv-BN` plus an identity (or 1x1
    /// projection) shortcut, then ReLU and pooling.
    ResCnn(CnnConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub layer: usize,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnSpec {
    pub layer: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv { cin: usize, cout: usize, k: usize },
    Bn { channels: usize },
    Linear { fin: usize, fout: usize },
}

impl Architecture {
    pub fn config(&self) -> &CnnConfig {
        match self {
            Architecture::Cnn(c) | Architecture::ResCnn(c) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.config();
        if c.widths.is_empty() {
            return Err(Error::config("model.widths", "at least one block is required"));
        }
        if c.in_channels == 0 || c.num_classes < 2 {
            return Err(Error::config(
                "model",
                "need at least one input channel and two classes",
            ));
        }
        let shrink = 1usize << (c.widths.len() - 1);
        if c.height < shrink || c.width < shrink {
            return Err(Error::config(
                "model.widths",
                format!(
                    "{} blocks need images of at least {shrink}x{shrink}",
                    c.widths.len()
                ),
            ));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let c = self.config();
        let mut out = Vec::new();
        let mut cin = c.in_channels;
        for &w in &c.widths {
            match self {
                Architecture::Cnn(_) => {
                    out.push(Layer::Conv { cin, cout: w, k: 3 });
                    out.push(Layer::Bn { channels: w });
                }
                Architecture::ResCnn(_) => {
                    out.push(Layer::Conv { cin, cout: w, k: 3 });
                    out.push(Layer::Bn { channels: w });
                    out.push(Layer::Conv { cin: w, cout: w, k: 3 });
                    out.push(Layer::Bn { channels: w });
                    if cin != w {
                        out.push(Layer::Conv { cin, cout: w, k: 1 });
                    }
                }
            }
            cin = w;
        }
        out.push(Layer::Linear {
            fin: cin,
            fout: c.num_classes,
        });
        out
    }

    /// Trainable parameters in their canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (layer, l) in self.layers().into_iter().enumerate() {
            match l {
                Layer::Conv { cin, cout, k } => specs.push(ParamSpec {
                    layer,
                    kind: ParamKind::Weight,
                    shape: vec![cout, cin, k, k],
                }),
                Layer::Bn { channels } => {
                    for kind in [ParamKind::Gamma, ParamKind::Beta] {
                        specs.push(ParamSpec {
                            layer,
                            kind,
                            shape: vec![channels],
                        });
                    }
                }
                Layer::Linear { fin, fout } => {
                    specs.push(ParamSpec {
                        layer,
                        kind: ParamKind::Weight,
                        shape: vec![fout, fin],
                    });
                    specs.push(ParamSpec {
                        layer,
                        kind: ParamKind::Bias,
                        shape: vec![fout],
                    });
                }
            }
        }
        specs
    }

    pub fn bn_specs(&self) -> Vec<BnSpec> {
        self.layers()
            .into_iter()
            .enumerate()
            .filter_map(|(layer, l)| match l {
                Layer::Bn { channels } => Some(BnSpec { layer, channels }),
                _ => None,
            })
            .collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.in_channels, c.height, c.width]
    }

    pub fn feature_dim(&self) -> usize {
        *self.config().widths.last().expect("validated")
    }

    /// Length of one row of [`GraphOutput::feature_map`].
    pub fn feature_map_dim(&self) -> usize {
        let c = self.config();
        let down = 1 << (c.widths.len() - 1);
        self.feature_dim() * (c.height / down) * (c.width / down)
    }
}

/// How BN layers normalize during a forward pass.
#[derive(Clone, Copy)]
pub enum BnNorm<'a> {
    /// Batch statistics (training mode).
    Batch,
    /// Fixed per-layer `(mean, var)` statistics (evaluation mode).
    Fixed(&'a [(Tensor, Tensor)]),
}

pub struct GraphOutput {
    /// `[N, classes]`
    pub logits: Var,
    /// Globally pooled last-block features, `[N, F]` (not differentiable).
    pub features: Tensor,
    /// Last-block activations before global pooling, `[N, C*h*w]`.
    pub feature_map: Tensor,
    /// Per BN layer `(mean, biased var)` of the batch; empty for fixed stats.
    pub batch_stats: Vec<(Var, Var)>,
}

struct Builder<'a> {
    params: &'a [Var],
    next: usize,
    norm: BnNorm<'a>,
    bn_index: usize,
    eps: f64,
    stats: Vec<(Var, Var)>,
    check_finite: bool,
    layer: usize,
}

impl Builder<'_> {
    fn take(&mut self) -> &Var {
        let p = &self.params[self.next];
        self.next += 1;
        p
    }

    fn check(&self, v: &Var) -> Result<()> {
        if self.check_finite && !v.value().is_finite() {
            return Err(Error::non_finite(format!("layer {}", self.layer)));
        }
        Ok(())
    }

    /// `x: [C, N, H, W]`
    fn conv(&mut self, x: &Var, k: usize) -> Result<Var> {
        let w = self.take().clone();
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let [c, n, h, wd] = dims4(x);
        debug_assert_eq!(c, cin);
        let cols = if k == 1 {
            x.reshape(&[cin, n * h * wd])
        } else {
            x.sparse(&maps::im2col(c, n, h, wd, k), false, &[cin * k * k, n * h * wd])
        };
        let y = w
            .reshape(&[cout, cin * k * k])
            .matmul(&cols)
            .reshape(&[cout, n, h, wd]);
        self.check(&y)?;
        self.layer += 1;
        Ok(y)
    }

    fn bn(&mut self, x: &Var) -> Result<Var> {
        let gamma = self.take().clone();
        let beta = self.take().clone();
        let shape = x.shape().to_vec();
        let c = shape[0];
        let inner = x.numel() / c;
        let y = match self.norm {
            BnNorm::Batch => {
                let mean = x.reduce_mid(1, c, inner).scale(1.0 / inner as f64);
                let xc = x.sub(&mean.expand_mid(1, inner, &shape));
                let var = xc.mul(&xc).reduce_mid(1, c, inner).scale(1.0 / inner as f64);
                let scale = var.offset(self.eps).powf(-0.5).mul(&gamma);
                let y = xc
                    .mul(&scale.expand_mid(1, inner, &shape))
                    .add(&beta.expand_mid(1, inner, &shape));
                self.stats.push((mean, var));
                y
            }
            BnNorm::Fixed(stats) => {
                let (mean, var) = &stats[self.bn_index];
                let inv = var.map(|v| 1.0 / (v + self.eps).sqrt());
                let mean = Var::constant(mean.clone());
                let scale = Var::constant(inv).mul(&gamma);
                x.sub(&mean.expand_mid(1, inner, &shape))
                    .mul(&scale.expand_mid(1, inner, &shape))
                    .add(&beta.expand_mid(1, inner, &shape))
            }
        };
        self.bn_index += 1;
        self.check(&y)?;
        self.layer += 1;
        Ok(y)
    }

    fn pool(x: &Var) -> Var {
        let [c, n, h, w] = dims4(x);
        x.sparse(&maps::avg_pool2(c, n, h, w), false, &[c, n, h / 2, w / 2])
    }

    fn linear(&mut self, feats_cn: &Var) -> Result<Var> {
        let w = self.take().clone();
        let b = self.take().clone();
        let n = feats_cn.shape()[1];
        let k = w.shape()[0];
        // [C, N]^T [K, C]^T = [N, K]
        let z = feats_cn
            .matmul_t(&w, true, true)
            .add(&b.expand_mid(n, 1, &[n, k]));
        self.check(&z)?;
        self.layer += 1;
        Ok(z)
    }
}

fn dims4(x: &Var) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Builds the forward graph for a batch `images: [N, C, H, W]`.
///
/// `params` must follow [`Architecture::param_specs`]. With `check_finite`
/// every layer output is scanned and the first non-finite layer is reported.
pub fn build_forward(
    arch: &Architecture,
    params: &[Var],
    images: &Var,
    norm: BnNorm<'_>,
    eps: f64,
    check_finite: bool,
) -> Result<GraphOutput> {
    let cfg = arch.config();
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Shape(format!(
            "images {:?} do not match [N, {}, {}, {}]",
            s, cfg.in_channels, cfg.height, cfg.width
        )));
    }
    if s[0] == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = s[0];
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut x = if c == 1 || n == 1 {
        images.reshape(&[c, n, h, w])
    } else {
        images.sparse(&maps::nchw_to_cnhw(n, c, h * w), false, &[c, n, h, w])
    };
    let mut b = Builder {
        params,
        next: 0,
        norm,
        bn_index: 0,
        eps,
        stats: Vec::new(),
        check_finite,
        layer: 0,
    };
    let blocks = cfg.widths.len();
    for (i, &width) in cfg.widths.iter().enumerate() {
        let cin = x.shape()[0];
        x = match arch {
            Architecture::Cnn(_) => {
                let y = b.conv(&x, 3)?;
                cfg.activation.apply(&b.bn(&y)?)
            }
            Architecture::ResCnn(_) => {
                let y = b.conv(&x, 3)?;
                let y = cfg.activation.apply(&b.bn(&y)?);
                let y = b.conv(&y, 3)?;
                let y = b.bn(&y)?;
                let skip = if cin != width { b.conv(&x, 1)? } else { x.clone() };
                cfg.activation.apply(&y.add(&skip))
            }
        };
        if i + 1 < blocks {
            x = Builder::pool(&x);
        }
    }
    let [c, n2, h, w] = dims4(&x);
    debug_assert_eq!(n, n2);
    let pooled = x
        .reduce_mid(1, c * n, h * w)
        .scale(1.0 / (h * w) as f64)
        .reshape(&[c, n]);
    let logits = b.linear(&pooled)?;
    debug_assert_eq!(b.next, params.len());
    let pv = pooled.value().data();
    let features = Tensor::from_parts(
        vec![n, c],
        (0..n).flat_map(|i| (0..c).map(move |j| pv[j * n + i])).collect(),
    );
    let xv = x.value().data();
    let hw = h * w;
    let feature_map = Tensor::from_parts(
        vec![n, c * hw],
        (0..n)
            .flat_map(|i| (0..c).flat_map(move |j| (0..hw).map(move |p| xv[(j * n + i) * hw + p])))
            .collect(),
    );
    Ok(GraphOutput {
        logits,
        feature_map,
        features,
        batch_stats: b.stats,
    })
}

/// Mean cross-entropy of `logits: [N, K]` against target distributions
/// `targets: [N, K]` (one-hot rows for hard labels).
pub fn cross_entropy(logits: &Var, targets: &Var) -> Var {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let lv = logits.value().data();
    let mut shift = Vec::with_capacity(n * k);
    for row in lv.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, k));
    }
    // the per-row shift is exact for normalized targets
    let z = logits.sub(&Var::constant(Tensor::from_parts(vec![n, k], shift)));
    let lse = z.exp().reduce_mid(1, n, k).ln();
    let logp = z.sub(&lse.expand_mid(1, k, &[n, k]));
    logp.mul(targets).sum().scale(-1.0 / n as f64)
}

/// One-hot rows for hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}
