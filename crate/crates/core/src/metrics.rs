//! Classification metrics: accuracy, macro F1, confusion, one-vs-rest ROC.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{LelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(FPR, TPR)` from `(0, 0)` to `(1, 1)`; empty when the class has no
    /// positives or no negatives.
    pub points: Vec<(f64, f64)>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub roc: Vec<RocCurve>,
    /// Classes without support, left out of the macro average.
    pub excluded_classes: Vec<usize>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(LelError::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let mut c = vec![vec![0; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k || p >= k {
            return Err(LelError::Contract(format!(
                "class index out of range 0..{k}: label {y}, prediction {p}"
            )));
        }
        c[y][p] += 1;
    }
    Ok(c)
}

/// Accuracy, per-class precision/recall/F1 and macro F1 from a confusion
/// matrix (no ROC).
pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Metrics {
    let k = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    let mut excluded = Vec::new();
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        precision[c] = safe_div(tp, predicted as f64);
        recall[c] = safe_div(tp, support as f64);
        f1[c] = safe_div(2.0 * precision[c] * recall[c], precision[c] + recall[c]);
        if support == 0 {
            excluded.push(c);
        } else {
            f1_sum += f1[c];
        }
    }
    let included = k - excluded.len();
    Metrics {
        accuracy: safe_div(correct as f64, total as f64),
        macro_f1: safe_div(f1_sum, included as f64),
        precision,
        recall,
        f1,
        confusion,
        roc: Vec::new(),
        excluded_classes: excluded,
    }
}

/// One-vs-rest ROC of `scores` against `positive` flags; thresholds sweep
/// every distinct score from high to low.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> (Vec<(f64, f64)>, Option<f64>) {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return (Vec::new(), None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    (pts, Some(auc))
}

/// Full metrics for posteriors `[N × K]`.
pub fn evaluate_probs(probs: &Array2<f64>, labels: &[usize]) -> Result<Metrics> {
    let k = probs.ncols();
    if probs.nrows() != labels.len() {
        return Err(LelError::Shape(format!(
            "{} posteriors vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let preds = argmax_rows(probs);
    let mut m = from_confusion(confusion_matrix(labels, &preds, k)?);
    m.roc = (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.column(c).to_vec();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let (points, auc) = roc_curve(&scores, &pos);
            RocCurve { class: c, points, auc }
        })
        .collect();
    Ok(m)
}

/// Mean negative log-likelihood with probability floor.
pub fn nll(probs: &Array2<f64>, labels: &[usize], floor: f64) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(floor).ln())
        .sum::<f64>()
        / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions() {
        let m = from_confusion(vec![vec![3, 0], vec![0, 4]]);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn two_class_confusion_oracle() {
        // class 0: P = 8/11, R = 8/10 → F1 = 16/21; class 1: P = 7/9, R = 7/10 → F1 = 14/19
        let m = from_confusion(vec![vec![8, 2], vec![3, 7]]);
        assert_eq!(m.accuracy, 0.75);
        let oracle = (16.0 / 21.0 + 14.0 / 19.0) / 2.0;
        assert!((m.macro_f1 - oracle).abs() < 1e-15);
        assert!((m.macro_f1 - 0.7494).abs() < 1e-4);
    }

    #[test]
    fn zero_support_class_is_excluded() {
        let m = from_confusion(vec![vec![2, 0, 0], vec![0, 0, 0], vec![0, 1, 3]]);
        assert_eq!(m.excluded_classes, vec![1]);
        let f1_2 = 2.0 * 1.0 * 0.75 / 1.75;
        assert!((m.macro_f1 - (1.0 + f1_2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let labels = [0, 1, 1, 2, 2, 2];
        let preds = [0, 2, 1, 2, 0, 2];
        let c = confusion_matrix(&labels, &preds, 3).unwrap();
        assert_eq!(
            c.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn perfect_roc_passes_through_corner() {
        let p = array![[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]];
        let m = evaluate_probs(&p, &[0, 0, 1, 1]).unwrap();
        for r in &m.roc {
            assert!(r.points.contains(&(0.0, 1.0)));
            assert_eq!(r.auc, Some(1.0));
            assert_eq!(*r.points.last().unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn tied_scores_form_one_step() {
        let (pts, auc) = roc_curve(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]);
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc, Some(0.5));
    }
}
