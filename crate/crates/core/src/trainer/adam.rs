//! Adam with bias correction.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One update of every `weights[i]` from `grads[i]`. Gradients are checked
/// for NaN/inf before anything is modified; `names` label diagnostics.
pub fn adam_step(
    weights: &mut [&mut [f64]],
    grads: &[&[f64]],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() || names.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "adam: {} weight tensors, {} gradients, {} names, {} moment slots",
            weights.len(),
            grads.len(),
            names.len(),
            state.m.len()
        )));
    }
    for (i, (w, g)) in weights.iter().zip(grads).enumerate() {
        if w.len() != g.len() || w.len() != state.m[i].len() {
            return Err(Error::Dimension(format!(
                "adam: {} has {} weights but {} gradients",
                names[i],
                w.len(),
                g.len()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {} in {}[{j}] at step {}",
                g[j],
                names[i],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..w.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
