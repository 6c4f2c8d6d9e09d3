//! Threshold and ranking metrics for binary boundary labels.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::models::TrainedModel;

fn check(y: &[u8], scores: &[f64]) -> Result<(), EvalError> {
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    if y.len() != scores.len() {
        return Err(EvalError::LengthMismatch { labels: y.len(), scores: scores.len() });
    }
    if let Some(&b) = y.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(b));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    Ok(())
}

/// Confusion counts for predictions `score >= threshold`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Harmonic mean of precision and recall, 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn confusion(y: &[u8], scores: &[f64], threshold: f64) -> Result<Confusion, EvalError> {
    check(y, scores)?;
    let mut c = Confusion::default();
    for (&l, &s) in y.iter().zip(scores) {
        match (l == 1, s >= threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn f1_score(y: &[u8], scores: &[f64], threshold: f64) -> Result<f64, EvalError> {
    Ok(confusion(y, scores, threshold)?.f1())
}

/// Mann-Whitney estimate `P(s+ > s-) + P(s+ = s-)/2` from average ranks.
pub fn roc_auc(y: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    check(y, scores)?;
    let npos = y.iter().filter(|&&l| l == 1).count();
    let nneg = y.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps half-ranks integral
    let mut rank_sum2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, average (start + 1 + end) / 2
        let pos_in_group = order[start..end].iter().filter(|&&i| y[i] == 1).count() as u64;
        rank_sum2 += pos_in_group * (start as u64 + 1 + end as u64);
        start = end;
    }
    let u2 = rank_sum2 - (npos as u64) * (npos as u64 + 1);
    Ok(u2 as f64 / (2.0 * npos as f64 * nneg as f64))
}

/// Average precision: `Σ_t (R_t - R_{t-1}) P_t` over distinct score
/// thresholds taken in decreasing order.
pub fn pr_auc(y: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    check(y, scores)?;
    let npos = y.iter().filter(|&&l| l == 1).count();
    if npos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if y[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - prev_tp) as f64 / npos as f64 * precision;
            prev_tp = tp;
        }
        start = end;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
    pub counts: Confusion,
    pub n: usize,
}

pub fn evaluate_scores(y: &[u8], scores: &[f64], threshold: f64) -> Result<MetricReport, EvalError> {
    let counts = confusion(y, scores, threshold)?;
    Ok(MetricReport {
        threshold,
        f1: counts.f1(),
        precision: counts.precision(),
        recall: counts.recall(),
        pr_auc: pr_auc(y, scores)?,
        roc_auc: roc_auc(y, scores)?,
        counts,
        n: y.len(),
    })
}

pub fn evaluate(model: &TrainedModel, x: ArrayView2<f64>, y: &[u8], threshold: f64) -> Result<MetricReport, EvalError> {
    let scores = model.predict_proba_batch(x)?;
    evaluate_scores(y, &scores, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_example() {
        let c = confusion(&[1, 1, 0, 0], &[0.6, 0.4, 0.6, 0.4], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.f1(), 0.5);
        assert_eq!(f1_score(&[1, 0], &[0.9, 0.1], 0.5).unwrap(), 1.0);
        assert_eq!(f1_score(&[1, 0], &[0.1, 0.1], 0.5).unwrap(), 0.0);
        assert!(f1_score(&[], &[], 0.5).is_err());
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[1, 1, 0], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1, 0, 1], &[0.3, 0.3, 0.3]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[1, 1], &[0.1, 0.2]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_auc(&[1, 0], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0, 1], &[0.9, 0.1]).unwrap(), 0.5);
        assert_eq!(pr_auc(&[1, 1], &[0.2, 0.7]).unwrap(), 1.0);
        assert!(matches!(pr_auc(&[0, 0], &[0.2, 0.7]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn report_rejects_single_class() {
        assert!(evaluate_scores(&[0, 0, 0], &[0.1, 0.2, 0.3], 0.5).is_err());
        let r = evaluate_scores(&[1, 0, 0], &[0.7, 0.2, 0.6], 0.5).unwrap();
        assert_eq!(r.counts.tp + r.counts.fp + r.counts.fn_ + r.counts.tn, 3);
        for v in [r.f1, r.pr_auc, r.roc_auc, r.precision, r.recall] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
