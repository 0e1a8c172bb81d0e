//! Siamese Local-CAM: attention maps back-propagated from the pair
//! distance through the encoder, deepest layer first, plus slice selection
//! and contour overlays.

mod contour;

use serde::{Deserialize, Serialize};

pub use contour::{marching_squares, render_overlay, OverlaySpec, Segment, SliceRule};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{siamese_forward, AlignDistHead, UNetModel};
use crate::tensor::{offset, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Query,
    Support,
}

/// Nonnegative single-channel map `[1,X,Y,Z]` for one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Tensor,
    pub layer: usize,
    pub branch: Branch,
}

impl AttentionMap {
    /// Copy scaled to max 1; an all-zero map stays zero.
    pub fn normalized(&self) -> Tensor {
        normalize(&self.values)
    }
}

pub fn normalize(map: &Tensor) -> Tensor {
    let m = map.max();
    let mut out = map.clone();
    if m > 0.0 {
        out.data.iter_mut().for_each(|v| *v /= m);
    }
    out
}

/// Elementwise `ReLU(∂d/∂A)`, same shape as the activations.
pub fn grad_weights(grads: &Tensor, activations: &Tensor) -> Result<Tensor> {
    if grads.shape != activations.shape {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match activations {:?}",
            grads.shape, activations.shape
        )));
    }
    let mut w = grads.clone();
    w.data.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(w)
}

/// `ReLU(Σ_k upstream·w_k·A_k)` over channels; `upstream` is `[1,X,Y,Z]`.
pub fn layer_attention(activations: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let [c, x, y, z] = activations.dims4()?;
    if weights.shape != activations.shape {
        return Err(Error::Dimension(format!(
            "weights {:?} do not match activations {:?}",
            weights.shape, activations.shape
        )));
    }
    if upstream.shape != [1, x, y, z] {
        return Err(Error::Dimension(format!(
            "upstream map {:?} does not match spatial dims [{x}, {y}, {z}]",
            upstream.shape
        )));
    }
    let vol = x * y * z;
    let mut out = vec![0.0; vol];
    for k in 0..c {
        let (a, w) = (&activations.data[k * vol..(k + 1) * vol], &weights.data[k * vol..(k + 1) * vol]);
        for i in 0..vol {
            out[i] += w[i] * a[i];
        }
    }
    for (o, u) in out.iter_mut().zip(&upstream.data) {
        *o = (*o * u).max(0.0);
    }
    Tensor::new(vec![1, x, y, z], out)
}

/// Nearest-neighbour resampling of a `[C,X,Y,Z]` volume to `dims`.
pub fn resample_nn(t: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let [c, x, y, z] = t.dims4()?;
    let src = [x, y, z];
    if src == dims {
        return Ok(t.clone());
    }
    let pick = |i: usize, a: usize| (i * src[a]) / dims[a];
    let mut out = Tensor::zeros(&[c, dims[0], dims[1], dims[2]]);
    for ch in 0..c {
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    out.data[offset(dims, ch, i, j, k)] = t.data[offset(src, ch, pick(i, 0), pick(j, 1), pick(k, 2))];
                }
            }
        }
    }
    Ok(out)
}

/// Default target layers: encoder levels above the bottleneck, deepest
/// first. A single-level encoder uses its only level.
pub fn default_layers(model: &UNetModel) -> Vec<usize> {
    let top = model.config.levels.saturating_sub(1).max(1);
    (0..top).rev().collect()
}

/// Output of one Siamese Local-CAM pass.
#[derive(Clone, Debug)]
pub struct PairAttention {
    pub distance: f64,
    /// Per target layer, deepest first.
    pub query_layers: Vec<AttentionMap>,
    pub support_layers: Vec<AttentionMap>,
    /// Shallowest layer map at patch resolution.
    pub query: AttentionMap,
    pub support: AttentionMap,
}

/// Backward from `d` once, then per branch walk `layers` deep to shallow.
/// Each layer's upstream factor is the previous map, max-normalized and
/// nearest-resampled; the deepest layer uses ones.
pub fn siamese_local_cam(
    model: &UNetModel,
    head: &AlignDistHead,
    query: &Tensor,
    support: &Tensor,
    layers: &[usize],
) -> Result<PairAttention> {
    if layers.is_empty() {
        return Err(Error::Parameter("no target layers".into()));
    }
    for (i, &l) in layers.iter().enumerate() {
        if l >= model.config.levels {
            return Err(Error::Parameter(format!(
                "layer {l} is not an encoder level (0..{})",
                model.config.levels
            )));
        }
        if i > 0 && l >= layers[i - 1] {
            return Err(Error::Parameter(format!(
                "target layers must run deepest to shallowest, got {layers:?}"
            )));
        }
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let bh = head.bind(&mut g, false);
    let (q, s) = (g.constant(query.clone()), g.constant(support.clone()));
    let out = siamese_forward(&mut g, model, &bound, bh, q, s, false)?;
    let distance = g.value(out.d).item();
    g.backward(out.d)?;

    let patch_dims = model.config.patch_shape;
    let mut per_branch = Vec::with_capacity(2);
    for (b, branch) in out.branches.iter().zip([Branch::Query, Branch::Support]) {
        let mut maps: Vec<AttentionMap> = Vec::with_capacity(layers.len());
        for &l in layers {
            let feat = b.encoder_features[l];
            let a = g.value(feat);
            // no gradient reached this node when d is stationary
            let grad = match g.grad(feat) {
                Some(v) => Tensor::new(a.shape.clone(), v.to_vec())?,
                None => Tensor::zeros(&a.shape),
            };
            let w = grad_weights(&grad, a)?;
            let dims = a.spatial()?;
            let upstream = match maps.last() {
                None => Tensor::full(&[1, dims[0], dims[1], dims[2]], 1.0),
                Some(prev) => resample_nn(&prev.normalized(), dims)?,
            };
            maps.push(AttentionMap {
                values: layer_attention(a, &w, &upstream)?,
                layer: l,
                branch,
            });
        }
        let last = maps.last().unwrap();
        let full = AttentionMap {
            values: resample_nn(&last.values, patch_dims)?,
            layer: last.layer,
            branch,
        };
        per_branch.push((maps, full));
    }
    let (support_layers, support_full) = per_branch.pop().unwrap();
    let (query_layers, query_full) = per_branch.pop().unwrap();
    Ok(PairAttention {
        distance,
        query_layers,
        support_layers,
        query: query_full,
        support: support_full,
    })
}

/// Z slice with the largest summed attention, smallest on ties.
pub fn select_best_slice(map: &Tensor) -> Result<usize> {
    let [c, x, y, z] = map.dims4()?;
    let plane = x * y;
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..z {
        let mut s = 0.0;
        for ch in 0..c {
            let start = (ch * z + k) * plane;
            s += map.data[start..start + plane].iter().sum::<f64>();
        }
        if s > best.1 {
            best = (k, s);
        }
    }
    if best.1 <= 0.0 {
        log::warn!("attention map is all zero; showing slice 0");
    }
    Ok(best.0)
}

/// Binary dilation by `iterations` steps of the 6-neighbourhood.
pub fn dilate(mask: &Tensor, iterations: usize) -> Result<Tensor> {
    let [c, x, y, z] = mask.dims4()?;
    let d = [x, y, z];
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for ch in 0..c {
            for k in 0..z {
                for j in 0..y {
                    for i in 0..x {
                        if cur.data[offset(d, ch, i, j, k)] == 0.0 {
                            continue;
                        }
                        let p = [i, j, k];
                        for axis in 0..3 {
                            for up in [false, true] {
                                let mut q = p;
                                if up && q[axis] + 1 < d[axis] {
                                    q[axis] += 1;
                                } else if !up && q[axis] > 0 {
                                    q[axis] -= 1;
                                } else {
                                    continue;
                                }
                                next.data[offset(d, ch, q[0], q[1], q[2])] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Share of attention mass on voxels where `region` is nonzero; `None` for
/// an all-zero map.
pub fn mass_fraction(map: &Tensor, region: &Tensor) -> Result<Option<f64>> {
    if map.shape != region.shape {
        return Err(Error::Dimension(format!(
            "map {:?} vs region {:?}",
            map.shape, region.shape
        )));
    }
    let total = map.sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let inside: f64 = map.data.iter().zip(&region.data).filter(|(_, &r)| r != 0.0).map(|(m, _)| m).sum();
    Ok(Some(inside / total))
}
