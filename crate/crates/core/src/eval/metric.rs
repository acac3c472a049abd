use crate::error::{Error, Result};
use crate::pool::MetricKind;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Probability that a random positive (label 1) outranks a random negative
/// (label 0), ties credited one half. Computed by sorting, with the pair
/// count kept in exact integer half-units.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("ROC AUC needs binary labels, found {l}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC AUC scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass(labels.first().copied().unwrap_or(0)));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tied blocks in ascending score order.
    let mut half_units: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let neg_in_block = (j - i) as u64 - pos_in_block;
        half_units += pos_in_block * (2 * negatives_below + neg_in_block);
        negatives_below += neg_in_block;
        i = j;
    }
    Ok(half_units as f64 / (2 * positives * negatives) as f64)
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores a row-major `n × classes` score matrix against `labels`. ACC uses
/// the row argmax. ROC AUC uses the class-1 column as the positive score.
pub fn metric(scores: &[f64], classes: usize, labels: &[usize], kind: MetricKind) -> Result<f64> {
    if classes == 0 || scores.len() != labels.len() * classes {
        return Err(Error::InvalidArgument(format!(
            "score matrix of {} entries does not match {} labels × {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    match kind {
        MetricKind::Accuracy => {
            let preds: Vec<usize> = scores.chunks_exact(classes).map(argmax).collect();
            accuracy(&preds, labels)
        }
        MetricKind::RocAuc => {
            if classes != 2 {
                return Err(Error::InvalidArgument(format!(
                    "ROC AUC is defined for binary tasks, got {classes} classes"
                )));
            }
            let positive: Vec<f64> = scores.chunks_exact(2).map(|r| r[1]).collect();
            roc_auc(&positive, labels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &[1, 1, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_is_one_half() {
        assert_eq!(roc_auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass(1))));
    }

    #[test]
    fn accuracy_on_exact_predictions() {
        assert_eq!(accuracy(&[0, 2, 1], &[0, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 2, 2, 1], &[0, 2, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn metric_dispatch() {
        let scores = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4];
        assert_eq!(metric(&scores, 2, &[0, 1, 1], MetricKind::Accuracy).unwrap(), 2.0 / 3.0);
        assert_eq!(metric(&scores, 2, &[0, 1, 0], MetricKind::RocAuc).unwrap(), 1.0);
        assert!(metric(&scores, 3, &[0, 1], MetricKind::RocAuc).is_err());
    }
}
