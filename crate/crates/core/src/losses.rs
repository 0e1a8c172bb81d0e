//! Pair objective: contrastive loss on the aligned distance plus a weighted
//! Dice-CE segmentation loss for each branch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dice_ce_terms, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub omega: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            omega: 1.5,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps must be > 0, got {}", self.dice_eps)));
        }
        Ok(())
    }
}

/// `y = 1` (same class) pulls the pair together, `y = 0` pushes it out to
/// the margin.
pub fn contrastive_loss(d: f64, same_class: bool, margin: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("distance must be >= 0, got {d}")));
    }
    Ok(if same_class { d } else { (margin - d).max(0.0) })
}

/// Soft Dice loss `1 − (2Σpg + eps)/(Σp + Σg + eps)` on probabilities.
pub fn dice_term(p: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::Dimension(format!(
            "dice: {} predictions vs {} targets",
            p.len(),
            g.len()
        )));
    }
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

fn check_binary(target: &Tensor) -> Result<()> {
    if let Some(v) = target.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("segmentation target must be binary, found {v}")));
    }
    Ok(())
}

/// `(dice_term, bce_term)` of mask logits against a binary target.
pub fn dice_ce_components(pred_logits: &Tensor, target: &Tensor, eps: f64) -> Result<(f64, f64)> {
    if pred_logits.shape != target.shape {
        return Err(Error::Dimension(format!(
            "dice_ce: logits {:?} vs target {:?}",
            pred_logits.shape, target.shape
        )));
    }
    check_binary(target)?;
    Ok(dice_ce_terms(&pred_logits.data, &target.data, eps))
}

/// Dice term plus mean binary cross-entropy, equally weighted.
pub fn dice_ce_loss(pred_logits: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let (dice, ce) = dice_ce_components(pred_logits, target, eps)?;
    Ok(dice + ce)
}

/// `contrastive + ω·seg₁ + ω·seg₂`, summed left to right like the graph
/// version.
pub fn combined_loss(contrastive: f64, seg: [f64; 2], omega: f64) -> f64 {
    contrastive + omega * seg[0] + omega * seg[1]
}

/// Graph nodes making up one pair's loss.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub total: NodeId,
    pub contrastive: NodeId,
    pub seg: [NodeId; 2],
}

/// Records the full pair objective on `g`.
pub fn pair_loss(
    g: &mut Graph,
    d: NodeId,
    same_class: bool,
    logits: [NodeId; 2],
    masks: [&Tensor; 2],
    cfg: &LossConfig,
) -> Result<PairLoss> {
    let contrastive = g.contrastive(d, same_class, cfg.margin)?;
    let mut seg = [contrastive; 2];
    for k in 0..2 {
        check_binary(masks[k])?;
        seg[k] = g.dice_ce(logits[k], masks[k], cfg.dice_eps)?;
    }
    let total = g.weighted_sum(&[(contrastive, 1.0), (seg[0], cfg.omega), (seg[1], cfg.omega)])?;
    Ok(PairLoss {
        total,
        contrastive,
        seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_table() {
        assert_eq!(contrastive_loss(0.7, true, 1.0).unwrap(), 0.7);
        assert!((contrastive_loss(0.3, false, 1.0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(contrastive_loss(1.2, false, 1.0).unwrap(), 0.0);
        assert!(matches!(contrastive_loss(-0.1, true, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn hard_dice_half() {
        let d = dice_term(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 1e-12).unwrap();
        assert!((d - 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_masks_have_zero_dice() {
        assert_eq!(dice_term(&[0.0; 5], &[0.0; 5], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn saturated_prediction_is_near_zero() {
        let target = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let logits = Tensor::new(vec![1, 2, 2, 1], vec![20.0, -20.0, -20.0, 20.0]).unwrap();
        let (dice, ce) = dice_ce_components(&logits, &target, 1e-5).unwrap();
        assert!(dice < 1e-3 && ce < 1e-3, "{dice} {ce}");
        assert!(dice >= 0.0 && ce >= 0.0);
    }

    #[test]
    fn dice_ce_rejects_bad_targets() {
        let logits = Tensor::zeros(&[1, 2, 1, 1]);
        let bad = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 1.0]).unwrap();
        assert!(matches!(dice_ce_loss(&logits, &bad, 1e-5), Err(Error::Domain(_))));
        let wrong = Tensor::zeros(&[1, 1, 2, 1]);
        assert!(matches!(dice_ce_loss(&logits, &wrong, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(0.2, [0.3, 0.4], 1.5), 1.25);
        assert_eq!(combined_loss(0.37, [0.3, 0.4], 0.0), 0.37);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = LossConfig::default();
        assert_eq!((c.margin, c.omega, c.dice_eps), (1.0, 1.5, 1e-5));
        c.validate().unwrap();
        assert!(LossConfig { margin: 0.0, ..c.clone() }.validate().is_err());
        assert!(LossConfig { omega: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn pair_loss_perfect_case_is_near_zero() {
        let mask = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![30.0, -30.0]).unwrap();
        let mut g = Graph::new();
        let d = g.constant(Tensor::scalar(0.0));
        let l1 = g.constant(logits.clone());
        let l2 = g.constant(logits);
        let loss = pair_loss(&mut g, d, true, [l1, l2], [&mask, &mask], &LossConfig::default()).unwrap();
        assert!(g.value(loss.total).item() < 1e-5);
    }
}
