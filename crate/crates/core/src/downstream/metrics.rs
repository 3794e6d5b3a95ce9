use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DownstreamError, Result};

/// Dice overlap of class `k`; 1.0 when the class is absent from both volumes.
pub fn dice(pred: &Array3<u16>, gt: &Array3<u16>, k: u16) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(DownstreamError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == k, b == k);
        p += ia as u64;
        g += ib as u64;
        both += (ia && ib) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Dice of classes `1..n_classes`, and whether each class was present in either volume.
pub fn dice_per_class(pred: &Array3<u16>, gt: &Array3<u16>, n_classes: usize) -> Result<Vec<(f64, bool)>> {
    (1..n_classes as u16)
        .map(|k| {
            let present = pred.iter().chain(gt.iter()).any(|&v| v == k);
            Ok((dice(pred, gt, k)?, present))
        })
        .collect()
}

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(DownstreamError::Input("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(DownstreamError::Input(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

/// Fraction of correct predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    check_pair(preds, labels)?;
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(DownstreamError::Label(format!("class id {} out of range for {k} classes", p.max(t))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(DownstreamError::Input(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DownstreamError::Input("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DownstreamError::Degenerate("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under the ROC curve; tied scores count half, as in the Mann-Whitney
/// statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}
