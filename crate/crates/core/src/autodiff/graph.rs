//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and backward walks it in reverse. A graph is a
//! single-use object: build, run `backward` once, read gradients, drop.

use crate::error::{Error, Result};
use crate::tensor::{offset, Tensor};

use super::conv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
        padding: [usize; 3],
    },
    ChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    UpsampleNn {
        input: NodeId,
        factor: [usize; 3],
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatChannels(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    InstanceNorm {
        input: NodeId,
        inv_std: Vec<f64>,
    },
    L2Distance(NodeId, NodeId),
    Sum(NodeId),
    Contrastive {
        d: NodeId,
        same_class: bool,
        margin: f64,
    },
    DiceCe {
        logits: NodeId,
        target: Vec<f64>,
        eps: f64,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the backward root w.r.t. `id`. `None` before backward or
    /// for nodes that do not depend on any `requires_grad` leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Hands the leaf tensor back with its `grad` field populated.
    pub fn leaf_tensor(&self, id: NodeId) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        t.requires_grad = self.nodes[id.0].requires_grad;
        t.grad = self.grad(id).map(<[f64]>::to_vec);
        t
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let mut value = value;
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Inserts an input. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(kernel);
        let out = conv::conv3d_forward(x, w, stride, padding)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias of shape `[C]` to a `[C,X,Y,Z]` volume.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        let [c, ..] = x.dims4()?;
        if b.shape != [c] {
            return Err(Error::Dimension(format!(
                "channel_bias: bias shape {:?} does not match {c} channels",
                b.shape
            )));
        }
        let vol = x.numel() / c;
        let mut out = x.clone();
        for (ch, chunk) in out.data.chunks_mut(vol).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b.data[ch]);
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias { input, bias }, rg))
    }

    pub fn upsample_nn(&mut self, input: NodeId, factor: [usize; 3]) -> Result<NodeId> {
        if factor.contains(&0) {
            return Err(Error::Parameter(format!(
                "upsample factor must be >= 1 per axis, got {factor:?}"
            )));
        }
        let x = self.value(input);
        let [c, sx, sy, sz] = x.dims4()?;
        let od = [sx * factor[0], sy * factor[1], sz * factor[2]];
        let mut out = Tensor::zeros(&[c, od[0], od[1], od[2]]);
        for ch in 0..c {
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let src = offset([sx, sy, sz], ch, 0, y / factor[1], z / factor[2]);
                    let dst = offset(od, ch, 0, y, z);
                    for xx in 0..od[0] {
                        out.data[dst + xx] = x.data[src + xx / factor[0]];
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::UpsampleNn { input, factor }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(&[input]);
        self.push(out, Op::Sigmoid(input), rg)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(what, x, y)?;
        let mut out = x.clone();
        out.data
            .iter_mut()
            .zip(&y.data)
            .for_each(|(o, &v)| *o = f(*o, v));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(input).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        let [ca, ax, ay, az] = x.dims4()?;
        let [cb, bx, by, bz] = y.dims4()?;
        if [ax, ay, az] != [bx, by, bz] {
            return Err(Error::Dimension(format!(
                "concat_channels: spatial dims {:?} and {:?} differ",
                [ax, ay, az],
                [bx, by, bz]
            )));
        }
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        data.extend_from_slice(&x.data);
        data.extend_from_slice(&y.data);
        let out = Tensor::new(vec![ca + cb, ax, ay, az], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// `[C,X,Y,Z] -> [C]`
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let [c, ..] = x.dims4()?;
        let vol = x.numel() / c;
        let pooled: Vec<f64> = x
            .data
            .chunks(vol)
            .map(|ch| ch.iter().sum::<f64>() / vol as f64)
            .collect();
        let out = Tensor::vector(&pooled);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    /// Per-channel standardization with biased variance.
    pub fn instance_norm(&mut self, input: NodeId, eps: f64) -> Result<NodeId> {
        let x = self.value(input);
        let [c, ..] = x.dims4()?;
        let vol = x.numel() / c;
        if vol < 2 {
            return Err(Error::Dimension(
                "instance_norm needs at least 2 voxels per channel".into(),
            ));
        }
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(c);
        for chunk in out.data.chunks_mut(vol) {
            let mean = chunk.iter().sum::<f64>() / vol as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::InstanceNorm { input, inv_std }, rg))
    }

    /// Euclidean norm of `a - b`. The gradient at `a == b` is taken as zero.
    pub fn l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 1 || x.shape != y.shape {
            return Err(Error::Dimension(format!(
                "l2_distance: expected equal-length vectors, got {:?} and {:?}",
                x.shape, y.shape
            )));
        }
        let d = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::L2Distance(a, b), rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// `y*d + (1-y)*max(0, m - d)` for a scalar distance node.
    pub fn contrastive(&mut self, d: NodeId, same_class: bool, margin: f64) -> Result<NodeId> {
        let dv = self.value(d);
        if !dv.is_scalar() {
            return Err(Error::Dimension(format!(
                "contrastive: distance must be scalar, got shape {:?}",
                dv.shape
            )));
        }
        let dist = dv.item();
        if dist < 0.0 || !dist.is_finite() {
            return Err(Error::Domain(format!("contrastive: invalid distance {dist}")));
        }
        let v = if same_class {
            dist
        } else {
            (margin - dist).max(0.0)
        };
        let rg = self.rg(&[d]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Contrastive {
                d,
                same_class,
                margin,
            },
            rg,
        ))
    }

    /// Soft Dice term plus mean binary cross-entropy, both on `sigmoid(logits)`.
    pub fn dice_ce(&mut self, logits: NodeId, target: &Tensor, eps: f64) -> Result<NodeId> {
        let l = self.value(logits);
        same_shape("dice_ce", l, target)?;
        let (dice, ce) = dice_ce_terms(&l.data, &target.data, eps);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(dice + ce),
            Op::DiceCe {
                logits,
                target: target.data.clone(),
                eps,
            },
            rg,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::Dimension(format!(
                    "weighted_sum: term {} is not scalar (shape {:?})",
                    id.0, v.shape
                )));
            }
            total += w * v.item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Sign pattern of every non-smooth op. Two inputs with equal signatures
    /// lie in the same smooth piece of the graph function.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(i) => sig.extend(self.value(*i).data.iter().map(|&v| v > 0.0)),
                Op::Contrastive {
                    d,
                    same_class: false,
                    margin,
                } => sig.push(self.value(*d).item() < *margin),
                Op::L2Distance(..) => sig.push(node.value.item() > 0.0),
                _ => {}
            }
        }
        sig
    }

    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.backward_with_seed(root, 1.0)
    }

    /// Backward pass with `d(root)` seeded by `seed` instead of 1.
    pub fn backward_with_seed(&mut self, root: NodeId, seed: f64) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a fresh graph".into(),
            ));
        }
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape
            )));
        }
        if !rv.item().is_finite() {
            return Err(Error::Usage(format!(
                "backward root is not finite ({})",
                rv.item()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            self.grads[root.0] = Some(vec![seed]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[kernel.0].value;
                let gx = self.nodes[input.0]
                    .requires_grad
                    .then(|| conv::conv3d_grad_input(g, x, w, stride, padding));
                let gw = self.nodes[kernel.0]
                    .requires_grad
                    .then(|| conv::conv3d_grad_kernel(g, x, w, stride, padding));
                if let Some(gx) = gx {
                    self.accumulate(input, |acc| add_into(acc, &gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(kernel, |acc| add_into(acc, &gw));
                }
            }
            Op::ChannelBias { input, bias } => {
                self.accumulate(input, |acc| add_into(acc, g));
                let c = self.nodes[bias.0].value.numel();
                let vol = g.len() / c;
                let gb: Vec<f64> = g.chunks(vol).map(|ch| ch.iter().sum()).collect();
                self.accumulate(bias, |acc| add_into(acc, &gb));
            }
            Op::UpsampleNn { input, factor } => {
                let [c, sx, sy, sz] = self.nodes[input.0].value.dims4().unwrap();
                let od = [sx * factor[0], sy * factor[1], sz * factor[2]];
                self.accumulate(input, |acc| {
                    for ch in 0..c {
                        for z in 0..od[2] {
                            for y in 0..od[1] {
                                let src = offset([sx, sy, sz], ch, 0, y / factor[1], z / factor[2]);
                                let dst = offset(od, ch, 0, y, z);
                                for xx in 0..od[0] {
                                    acc[src + xx / factor[0]] += g[dst + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(input) => {
                let x = self.nodes[input.0].value.data.clone();
                self.accumulate(input, |acc| {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(g).zip(&x) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(input) => {
                let y = self.nodes[idx].value.data.clone();
                self.accumulate(input, |acc| {
                    for ((a, &gv), &yv) in acc.iter_mut().zip(g).zip(&y) {
                        *a += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(a, |acc| add_into(acc, g));
                self.accumulate(b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |acc| add_into(acc, g));
                self.accumulate(b, |acc| acc.iter_mut().zip(g).for_each(|(x, &v)| *x -= v));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.accumulate(a, |acc| {
                    for ((x, &gv), &o) in acc.iter_mut().zip(g).zip(&bv) {
                        *x += gv * o;
                    }
                });
                self.accumulate(b, |acc| {
                    for ((x, &gv), &o) in acc.iter_mut().zip(g).zip(&av) {
                        *x += gv * o;
                    }
                });
            }
            Op::Scale(input, f) => {
                self.accumulate(input, |acc| acc.iter_mut().zip(g).for_each(|(x, &v)| *x += f * v));
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].value.numel();
                self.accumulate(a, |acc| add_into(acc, &g[..na]));
                self.accumulate(b, |acc| add_into(acc, &g[na..]));
            }
            Op::GlobalAvgPool(input) => {
                let n = self.nodes[input.0].value.numel();
                let vol = n / g.len();
                self.accumulate(input, |acc| {
                    for (ch, chunk) in acc.chunks_mut(vol).enumerate() {
                        let v = g[ch] / vol as f64;
                        chunk.iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = self.nodes[idx].value.data.clone();
                let vol = y.len() / inv_std.len();
                let n = vol as f64;
                self.accumulate(input, |acc| {
                    for (ch, inv) in inv_std.iter().enumerate() {
                        let r = ch * vol..(ch + 1) * vol;
                        let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for ((a, &gv), &yv) in acc[r].iter_mut().zip(gs).zip(ys) {
                            *a += inv / n * (n * gv - sum_g - yv * sum_gy);
                        }
                    }
                });
            }
            Op::L2Distance(a, b) => {
                let d = self.nodes[idx].value.item();
                if d > 0.0 {
                    let diff: Vec<f64> = self.nodes[a.0]
                        .value
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(p, q)| g[0] * (p - q) / d)
                        .collect();
                    self.accumulate(a, |acc| add_into(acc, &diff));
                    self.accumulate(b, |acc| acc.iter_mut().zip(&diff).for_each(|(x, v)| *x -= v));
                }
            }
            Op::Sum(input) => {
                self.accumulate(input, |acc| acc.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Contrastive {
                d,
                same_class,
                margin,
            } => {
                let dist = self.nodes[d.0].value.item();
                let slope = if same_class {
                    1.0
                } else if dist < margin {
                    -1.0
                } else {
                    0.0
                };
                self.accumulate(d, |acc| acc[0] += slope * g[0]);
            }
            Op::DiceCe {
                logits,
                target,
                eps,
            } => {
                let l = self.nodes[logits.0].value.data.clone();
                let gl = dice_ce_grad(&l, &target, eps);
                self.accumulate(logits, |acc| {
                    acc.iter_mut().zip(&gl).for_each(|(x, v)| *x += g[0] * v)
                });
            }
            Op::WeightedSum(terms) => {
                for (id, w) in terms {
                    self.accumulate(id, |acc| acc[0] += w * g[0]);
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
}

/// `(dice_term, ce_term)` for logits against a binary target.
pub(crate) fn dice_ce_terms(logits: &[f64], target: &[f64], eps: f64) -> (f64, f64) {
    let n = logits.len() as f64;
    let (mut inter, mut sp, mut sg, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for (&l, &t) in logits.iter().zip(target) {
        let p = sigmoid(l);
        inter += p * t;
        sp += p;
        sg += t;
        ce += softplus(l) - t * l;
    }
    let dice = 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
    (dice, ce / n)
}

fn dice_ce_grad(logits: &[f64], target: &[f64], eps: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
    let num = 2.0 * inter + eps;
    p.iter()
        .zip(target)
        .map(|(&pj, &tj)| {
            let d_dice_dp = -(2.0 * tj * denom - num) / (denom * denom);
            d_dice_dp * pj * (1.0 - pj) + (pj - tj) / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(c: usize, d: [usize; 3], data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, d[0], d[1], d[2]], data).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-3.0, 2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data, vec![0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data[2], 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, -2.0, 5.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(g.leaf_tensor(x).grad.unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        let unused = g.leaf(Tensor::vector(&[3.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[1.0]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.l2_distance(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_identity_and_repeat() {
        let mut g = Graph::new();
        let x = g.leaf(vol(1, [2, 1, 1], vec![1.5, -2.0]).with_grad());
        let same = g.upsample_nn(x, [1, 1, 1]).unwrap();
        assert_eq!(g.value(same).data, vec![1.5, -2.0]);

        let mut g = Graph::new();
        let x = g.leaf(vol(1, [1, 1, 1], vec![7.0]).with_grad());
        let up = g.upsample_nn(x, [2, 2, 2]).unwrap();
        assert_eq!(g.value(up).shape, vec![1, 2, 2, 2]);
        assert!(g.value(up).data.iter().all(|&v| v == 7.0));
        let s = g.sum(up);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0]);

        let mut g = Graph::new();
        let x = g.constant(vol(1, [1, 1, 1], vec![7.0]));
        assert!(matches!(g.upsample_nn(x, [0, 1, 1]), Err(Error::Parameter(_))));
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let mut g = Graph::new();
        let mut data = vec![3.0; 8];
        data.extend(vec![-1.5; 8]);
        let x = g.constant(vol(2, [2, 2, 2], data));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data, vec![3.0, -1.5]);
    }

    #[test]
    fn concat_requires_equal_spatial_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 2, 2, 1]));
        assert!(matches!(g.concat_channels(a, b), Err(Error::Dimension(_))));
        let c = g.constant(Tensor::full(&[2, 2, 2, 2], 1.0));
        let ac = g.concat_channels(a, c).unwrap();
        assert_eq!(g.value(ac).shape, vec![3, 2, 2, 2]);
        assert_eq!(g.value(ac).data[8..].iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(vol(1, [4, 1, 1], vec![2.5; 4]));
        let y = g.instance_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));

        let x = g.constant(vol(1, [2, 1, 1], vec![-1.0, 1.0]));
        let y = g.instance_norm(x, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data[0] + expected).abs() < 1e-12);
        assert!((g.value(y).data[1] - expected).abs() < 1e-12);
        assert!((g.value(y).data[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn instance_norm_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..5 * 4 * 3).map(|_| rng.random_range(-4.0..9.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(vol(1, [5, 4, 3], data));
        let y = g.instance_norm(x, 1e-5).unwrap();
        let out = &g.value(y).data;
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn instance_norm_rejects_single_voxel() {
        let mut g = Graph::new();
        let x = g.constant(vol(1, [1, 1, 1], vec![1.0]));
        assert!(g.instance_norm(x, 1e-5).is_err());
    }

    #[test]
    fn l2_distance_examples() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[0.0, 0.0]).with_grad());
        let b = g.constant(Tensor::vector(&[3.0, 4.0]));
        let d = g.l2_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 5.0);
        let same = g.l2_distance(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[1.0, 0.0]).with_grad());
        let b = g.constant(Tensor::vector(&[0.0, 0.0]));
        let d = g.l2_distance(a, b).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[0.0, 1.0]).with_grad());
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn weighted_sum_rejects_vectors() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(g.weighted_sum(&[(v, 1.0)]).is_err());
    }

    #[test]
    fn seeded_backward_scales_grads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward_with_seed(s, 3.0).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 12.0]);
    }
}
