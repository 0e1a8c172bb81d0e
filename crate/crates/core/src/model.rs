//! Shared-weight 3D U-Net branches and the AlignDist metric head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Encoder depth; `levels - 1` stride-2 downsamplings.
    pub levels: usize,
    pub base_channels: usize,
    /// Bottleneck channel count, `base_channels * 2^(levels-1)`.
    pub latent_dim: usize,
    pub patch_shape: [usize; 3],
    pub norm_enabled: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::desk()
    }
}

impl UNetConfig {
    pub fn desk() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 8,
            latent_dim: 32,
            patch_shape: [16, 16, 8],
            norm_enabled: true,
        }
    }

    pub fn full_scale() -> Self {
        UNetConfig {
            levels: 4,
            base_channels: 32,
            latent_dim: 256,
            patch_shape: [64, 64, 32],
            norm_enabled: true,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims of the feature map produced by encoder level `level`.
    pub fn level_shape(&self, level: usize) -> [usize; 3] {
        self.patch_shape.map(|d| d >> level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be >= 1".into()));
        }
        let factor = 1usize << (self.levels - 1);
        for (axis, &d) in ["X", "Y", "Z"].iter().zip(&self.patch_shape) {
            if d == 0 || d % factor != 0 {
                return Err(Error::Config(format!(
                    "patch axis {axis} = {d} is not divisible by 2^(levels-1) = {factor}"
                )));
            }
        }
        let bottleneck = self.channels(self.levels - 1);
        if self.latent_dim != bottleneck {
            return Err(Error::Config(format!(
                "latent_dim {} must equal bottleneck channels {bottleneck}",
                self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Learned embedding of one patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    pub config: UNetConfig,
    params: Vec<(String, Tensor)>,
}

/// Graph node ids of a model's parameters, in the model's order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    ids: Vec<NodeId>,
}

impl BoundModel {
    /// Uses existing nodes, in [`UNetModel::param_specs`] order, as the
    /// model's parameters.
    pub fn from_ids(config: &UNetConfig, ids: Vec<NodeId>) -> Result<Self> {
        let want = param_names(config).len();
        if ids.len() != want {
            return Err(Error::Parameter(format!("model needs {want} parameter nodes, got {}", ids.len())));
        }
        Ok(BoundModel { ids })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Per-branch outputs of a U-Net forward pass.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub code: NodeId,
    pub logits: Option<NodeId>,
    /// Encoder block outputs, shallowest first.
    pub encoder_features: Vec<NodeId>,
}

struct Conv {
    weight: usize,
    bias: usize,
}

fn param_names(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let k = |o: usize, i: usize, e: usize| vec![o, i, e, e, e];
    for l in 0..cfg.levels {
        let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
        let c = cfg.channels(l);
        out.push((format!("enc.{l}.conv1.weight"), k(c, cin, 3)));
        out.push((format!("enc.{l}.conv1.bias"), vec![c]));
        out.push((format!("enc.{l}.conv2.weight"), k(c, c, 3)));
        out.push((format!("enc.{l}.conv2.bias"), vec![c]));
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let c = cfg.channels(l);
        let cin = cfg.channels(l + 1) + c;
        out.push((format!("dec.{l}.conv.weight"), k(c, cin, 3)));
        out.push((format!("dec.{l}.conv.bias"), vec![c]));
    }
    out.push(("head.weight".into(), k(1, cfg.base_channels, 1)));
    out.push(("head.bias".into(), vec![1]));
    out
}

impl UNetModel {
    /// He-normal weights, zero biases, fully determined by `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_names(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 5 {
                    let fan_in = shape[1..].iter().product::<usize>() as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).unwrap()
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(UNetModel { config, params })
    }

    /// Reassembles a model from named tensors, checking names and shapes.
    pub fn from_params(config: UNetConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = param_names(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "model expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || *shape != t.shape {
                return Err(Error::Format(format!(
                    "parameter {name} {shape:?} does not match {got_name} {:?}",
                    t.shape
                )));
            }
        }
        Ok(UNetModel { config, params })
    }

    pub fn param_specs(config: &UNetConfig) -> Vec<(String, Vec<usize>)> {
        param_names(config)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.") || name.starts_with("head.")
    }

    /// Registers every parameter once; both Siamese branches then reuse the
    /// same nodes, so their gradients accumulate into one set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundModel { ids }
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        let want = [1, self.config.patch_shape[0], self.config.patch_shape[1], self.config.patch_shape[2]];
        if patch.shape != want {
            return Err(Error::Dimension(format!(
                "patch shape {:?} does not match model input {:?}",
                patch.shape, want
            )));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph, b: &BoundModel, x: NodeId, c: Conv, stride: usize, pad: usize) -> Result<NodeId> {
        let y = g.conv3d(x, b.ids[c.weight], [stride; 3], [pad; 3])?;
        g.channel_bias(y, b.ids[c.bias])
    }

    /// Encoder (and optionally decoder) for one branch.
    pub fn branch(&self, g: &mut Graph, bound: &BoundModel, patch: NodeId, with_decoder: bool) -> Result<BranchOutput> {
        self.check_patch(g.value(patch))?;
        let cfg = &self.config;
        let mut feats = Vec::with_capacity(cfg.levels);
        let mut x = patch;
        for l in 0..cfg.levels {
            let base = 4 * l;
            let stride = if l == 0 { 1 } else { 2 };
            let mut h = self.conv(g, bound, x, Conv { weight: base, bias: base + 1 }, stride, 1)?;
            if cfg.norm_enabled {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.relu(h);
            h = self.conv(g, bound, h, Conv { weight: base + 2, bias: base + 3 }, 1, 1)?;
            x = g.relu(h);
            feats.push(x);
        }
        let code = g.global_avg_pool(x)?;
        let logits = if with_decoder {
            let mut idx = 4 * cfg.levels;
            let mut up = x;
            for l in (0..cfg.levels - 1).rev() {
                let u = g.upsample_nn(up, [2; 3])?;
                let cat = g.concat_channels(u, feats[l])?;
                let h = self.conv(g, bound, cat, Conv { weight: idx, bias: idx + 1 }, 1, 1)?;
                up = g.relu(h);
                idx += 2;
            }
            Some(self.conv(g, bound, up, Conv { weight: idx, bias: idx + 1 }, 1, 0)?)
        } else {
            None
        };
        Ok(BranchOutput {
            code,
            logits,
            encoder_features: feats,
        })
    }

    /// Latent code of a patch with no gradient tracking.
    pub fn encode(&self, patch: &Tensor) -> Result<LatentCode> {
        self.check_patch(patch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let p = g.constant(patch.clone());
        let out = self.branch(&mut g, &bound, p, false)?;
        Ok(LatentCode(g.value(out.code).data.clone()))
    }

    /// One-channel mask logits at patch resolution.
    pub fn forward_segment(&self, patch: &Tensor) -> Result<Tensor> {
        self.check_patch(patch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let p = g.constant(patch.clone());
        let out = self.branch(&mut g, &bound, p, true)?;
        Ok(g.value(out.logits.expect("decoder requested")).clone())
    }
}

/// Elementwise affine alignment `A∘c + b` of latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignDistHead {
    pub a: Tensor,
    pub b: Tensor,
}

impl AlignDistHead {
    /// Identity transform: A = 1, b = 0.
    pub fn identity(n: usize) -> Self {
        AlignDistHead {
            a: Tensor::full(&[n], 1.0),
            b: Tensor::zeros(&[n]),
        }
    }

    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Dimension(format!(
                "AlignDist A has length {} but b has {}",
                a.len(),
                b.len()
            )));
        }
        Ok(AlignDistHead {
            a: Tensor::vector(&a),
            b: Tensor::vector(&b),
        })
    }

    pub fn len(&self) -> usize {
        self.a.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.a.numel() == 0
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        let (a, b) = if trainable {
            (g.param(self.a.clone()), g.param(self.b.clone()))
        } else {
            (g.constant(self.a.clone()), g.constant(self.b.clone()))
        };
        BoundHead { a, b }
    }

    /// Aligned code `A∘c + b`.
    pub fn transform(&self, code: &LatentCode) -> Result<Vec<f64>> {
        self.check(code.len())?;
        Ok(code
            .0
            .iter()
            .zip(&self.a.data)
            .zip(&self.b.data)
            .map(|((c, a), b)| a * c + b)
            .collect())
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "code length {n} does not match AlignDist length {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `‖A∘(c1 − c2)‖₂`; the bias cancels exactly.
    pub fn distance(&self, c1: &LatentCode, c2: &LatentCode) -> Result<f64> {
        self.check(c1.len())?;
        self.check(c2.len())?;
        Ok(align_distance_raw(&self.a.data, &c1.0, &c2.0))
    }
}

/// Unchecked AlignDist on raw slices. Evaluation order matches the graph
/// version bit for bit.
pub fn align_distance_raw(a: &[f64], c1: &[f64], c2: &[f64]) -> f64 {
    a.iter()
        .zip(c1.iter().zip(c2))
        .map(|(a, (p, q))| {
            let v = a * (p - q);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub a: NodeId,
    pub b: NodeId,
}

/// Graph version of [`AlignDistHead::distance`].
pub fn align_dist(g: &mut Graph, head: BoundHead, c1: NodeId, c2: NodeId) -> Result<NodeId> {
    let n = g.value(head.a).numel();
    for c in [c1, c2] {
        if g.value(c).shape != [n] {
            return Err(Error::Dimension(format!(
                "code shape {:?} does not match AlignDist length {n}",
                g.value(c).shape
            )));
        }
    }
    let diff = g.sub(c1, c2)?;
    let scaled = g.mul(head.a, diff)?;
    let zero = g.constant(Tensor::zeros(&[n]));
    g.l2_distance(scaled, zero)
}

#[derive(Clone, Debug)]
pub struct SiameseOutput {
    pub d: NodeId,
    pub branches: [BranchOutput; 2],
}

/// Both branches through one bound weight set, then AlignDist.
pub fn siamese_forward(
    g: &mut Graph,
    model: &UNetModel,
    bound: &BoundModel,
    head: BoundHead,
    patch1: NodeId,
    patch2: NodeId,
    with_decoder: bool,
) -> Result<SiameseOutput> {
    let b1 = model.branch(g, bound, patch1, with_decoder)?;
    let b2 = model.branch(g, bound, patch2, with_decoder)?;
    let d = align_dist(g, head, b1.code, b2.code)?;
    Ok(SiameseOutput { d, branches: [b1, b2] })
}
