//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a non-smooth point.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub samples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            samples: 50,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Standard-normal inputs of the given shapes, drawn from `seed`, then
/// checked with [`grad_check_inputs`].
pub fn grad_check<F>(build: F, shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(s.clone(), data)
        })
        .collect::<Result<_>>()?;
    grad_check_inputs(build, &inputs, seed, GradCheckOptions::default())
}

fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    Ok((g.value(root).item(), g.kink_signature()))
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences on `options.samples` coordinates drawn across all
/// inputs. Coordinates sitting on a kink (relu at 0, hinge at the margin,
/// zero distance) are detected by a change in the graph's kink signature
/// and excluded.
pub fn grad_check_inputs<F>(build: F, inputs: &[Tensor], seed: u64, options: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    let base_sig = g.kink_signature();
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Parameter("grad_check: inputs are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let order = sample(&mut rng, total, total);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for flat in order.iter() {
        if report.checked >= options.samples {
            break;
        }
        let (which, coord) = locate(&sizes, flat);
        let orig = work[which].data[coord];

        work[which].data[coord] = orig + options.step;
        let (plus, sig_plus) = evaluate(&build, &work)?;
        work[which].data[coord] = orig - options.step;
        let (minus, sig_minus) = evaluate(&build, &work)?;
        work[which].data[coord] = orig;

        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * options.step);
        let err = relative_error(analytic[which][coord], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond total size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let report = grad_check(
            |g, ids| {
                let s = g.scale(ids[0], 3.0);
                let t = g.add(s, ids[1])?;
                Ok(g.sum(t))
            },
            &[vec![7], vec![7]],
            1,
        )
        .unwrap();
        assert_eq!(report.checked, 14);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn relu_zero_is_excluded() {
        let x = Tensor::vector(&[0.0, 0.5, -0.7]);
        let report = grad_check_inputs(
            |g, ids| {
                let r = g.relu(ids[0]);
                Ok(g.sum(r))
            },
            &[x],
            0,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
