//! Ranking and classification metrics with malignant as the positive class.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

fn positives(labels: &[Label]) -> usize {
    labels.iter().filter(|&&l| l == Label::Malignant).count()
}

/// Mann-Whitney estimate `P(s_mal > s_ben) + ½·P(s_mal = s_ben)`.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Malignant)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Benign)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric("roc_auc needs both classes".into()));
    }
    // Count in half-units so the sum stays an exact integer.
    let mut half_wins: u64 = 0;
    for &p in &pos {
        for &n in &neg {
            half_wins += match p.partial_cmp(&n) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(half_wins as f64 / (2 * pos.len() * neg.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called malignant.
    pub threshold: f64,
}

/// ROC operating points from the strictest threshold down, nondecreasing
/// in both rates.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter("roc_curve: length mismatch".into()));
    }
    let p = positives(labels);
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric("roc_curve needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match labels[order[i]] {
                Label::Malignant => tp += 1,
                Label::Benign => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: t,
        });
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn classification_report(predicted: &[Label], actual: &[Label]) -> Result<ClassificationReport> {
    if predicted.len() != actual.len() {
        return Err(Error::Parameter(format!(
            "classification_report: {} predictions vs {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Parameter("classification_report: no predictions".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(actual) {
        correct += (p == a) as usize;
        match (p, a) {
            (Label::Malignant, Label::Malignant) => tp += 1,
            (Label::Malignant, Label::Benign) => fp += 1,
            (Label::Benign, Label::Malignant) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        log::warn!("no positive predictions; precision and F1 reported as 0");
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok(ClassificationReport {
        accuracy: correct as f64 / predicted.len() as f64,
        recall,
        precision,
        f1: f1_score(precision, recall),
    })
}
