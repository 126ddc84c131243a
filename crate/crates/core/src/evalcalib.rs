//! Accuracy, calibration and per-class classification metrics.
//!
//! Everything consumes a [`PredictionLog`]: row-stochastic probability
//! vectors paired with true labels. Confidence is the max probability,
//! prediction the argmax (ties to the lowest class id). Per-class metrics
//! that are undefined on a given log (no positives, no predicted positives)
//! are reported as absent and excluded from macro averages.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionLog {
    probs: Tensor,
    truth: Vec<usize>,
}

impl PredictionLog {
    pub fn new(probs: Tensor, truth: Vec<usize>) -> Result<PredictionLog> {
        if probs.ndim() != 2 {
            return Err(Error::shape("PredictionLog::new", "[N, C]", format!("{:?}", probs.shape())));
        }
        if probs.rows() != truth.len() {
            return Err(Error::shape(
                "PredictionLog::new",
                format!("{} labels", probs.rows()),
                format!("{}", truth.len()),
            ));
        }
        let c = probs.cols();
        if let Some(&bad) = truth.iter().find(|&&t| t >= c) {
            return Err(Error::shape("PredictionLog::new", format!("labels < {c}"), format!("{bad}")));
        }
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument("probabilities must be nonnegative"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("probability rows must sum to 1"));
            }
        }
        Ok(PredictionLog { probs, truth })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    /// Argmax class, ties resolved to the lowest id.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.probs.row(i);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best
    }

    /// Max probability of sample `i`.
    pub fn confidence(&self, i: usize) -> f64 {
        let row = self.probs.row(i);
        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyLog)
        } else {
            Ok(())
        }
    }
}

pub fn accuracy(log: &PredictionLog) -> Result<f64> {
    log.require_nonempty()?;
    let correct = (0..log.len()).filter(|&i| log.predicted(i) == log.truth[i]).count();
    Ok(correct as f64 / log.len() as f64)
}

/// Index of the uniform bin holding `confidence`, with exact edges going to
/// the upper bin. Edges are compared as k/m directly rather than through a
/// multiply, so a confidence equal to an edge value lands deterministically.
fn bin_index(confidence: f64, m: usize) -> usize {
    let mut bin = 0;
    for k in 1..m {
        if confidence >= k as f64 / m as f64 {
            bin = k;
        } else {
            break;
        }
    }
    bin
}

/// Uniform-bin reliability summary.
#[derive(Clone, Debug, Serialize)]
pub struct ReliabilityBins {
    /// m+1 uniform edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean confidence per bin; absent for empty bins.
    pub mean_confidence: Vec<Option<f64>>,
    /// Accuracy per bin; absent for empty bins.
    pub accuracy: Vec<Option<f64>>,
}

pub fn reliability(log: &PredictionLog, m: usize) -> Result<ReliabilityBins> {
    log.require_nonempty()?;
    if m == 0 {
        return Err(Error::InvalidArgument("reliability needs at least one bin"));
    }
    let mut counts = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut correct = vec![0usize; m];
    for i in 0..log.len() {
        let b = bin_index(log.confidence(i), m);
        counts[b] += 1;
        conf_sum[b] += log.confidence(i);
        if log.predicted(i) == log.truth[i] {
            correct[b] += 1;
        }
    }
    let mean_confidence = counts
        .iter()
        .zip(&conf_sum)
        .map(|(&n, &s)| if n > 0 { Some(s / n as f64) } else { None })
        .collect();
    let accuracy = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| if n > 0 { Some(c as f64 / n as f64) } else { None })
        .collect();
    let edges = (0..=m).map(|k| k as f64 / m as f64).collect();
    Ok(ReliabilityBins { edges, counts, mean_confidence, accuracy })
}

/// Expected calibration error over `m` uniform confidence bins:
/// sum over bins of (n_b/N)·|acc_b − conf_b|.
pub fn ece(log: &PredictionLog, m: usize) -> Result<f64> {
    let bins = reliability(log, m)?;
    let n = log.len() as f64;
    let mut total = 0.0;
    for b in 0..bins.counts.len() {
        if bins.counts[b] == 0 {
            continue;
        }
        let acc = bins.accuracy[b].unwrap();
        let conf = bins.mean_confidence[b].unwrap();
        total += bins.counts[b] as f64 / n * (acc - conf).abs();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub top1_error: f64,
    /// Top-k error with k = min(5, C).
    pub top5_error: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub macro_auc: Option<f64>,
}

/// True when the true class sits among the `k` highest probabilities; ties
/// are broken toward lower class ids, matching `predicted`.
fn in_top_k(row: &[f64], truth: usize, k: usize) -> bool {
    let mut ahead = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[truth] || (p == row[truth] && j < truth) {
            ahead += 1;
        }
    }
    ahead < k
}

/// One-vs-rest AUC from the rank statistic with average ranks for ties.
/// Absent when either side of the split is empty.
fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Average rank of the tied block spanning positions i..j (1-based).
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum += avg;
            }
        }
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

pub fn classification_metrics(log: &PredictionLog) -> Result<ClassificationMetrics> {
    log.require_nonempty()?;
    let c = log.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument("classification metrics need at least two classes"));
    }
    let n = log.len();
    let preds: Vec<usize> = (0..n).map(|i| log.predicted(i)).collect();

    let acc = preds.iter().zip(&log.truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
    let k5 = c.min(5);
    let top5_hits = (0..n).filter(|&i| in_top_k(log.probs.row(i), log.truth[i], k5)).count();

    let mut per_class = Vec::with_capacity(c);
    for class in 0..c {
        let tp = (0..n).filter(|&i| preds[i] == class && log.truth[i] == class).count();
        let fp = (0..n).filter(|&i| preds[i] == class && log.truth[i] != class).count();
        let fnn = (0..n).filter(|&i| preds[i] != class && log.truth[i] == class).count();
        let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
        let recall = if tp + fnn > 0 { Some(tp as f64 / (tp + fnn) as f64) } else { None };
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let scores: Vec<f64> = (0..n).map(|i| log.probs.row(i)[class]).collect();
        let positive: Vec<bool> = log.truth.iter().map(|&t| t == class).collect();
        let auc = rank_auc(&scores, &positive);
        per_class.push(ClassMetrics { precision, recall, f1, auc });
    }

    Ok(ClassificationMetrics {
        accuracy: acc,
        top1_error: 1.0 - acc,
        top5_error: 1.0 - top5_hits as f64 / n as f64,
        macro_precision: macro_mean(per_class.iter().map(|m| m.precision)),
        macro_recall: macro_mean(per_class.iter().map(|m| m.recall)),
        macro_f1: macro_mean(per_class.iter().map(|m| m.f1)),
        macro_auc: macro_mean(per_class.iter().map(|m| m.auc)),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(rows: &[Vec<f64>], truth: &[usize]) -> PredictionLog {
        PredictionLog::new(Tensor::from_rows(rows).unwrap(), truth.to_vec()).unwrap()
    }

    #[test]
    fn log_validation() {
        let t = Tensor::from_rows(&[vec![0.6, 0.4]]).unwrap();
        assert!(PredictionLog::new(t.clone(), vec![2]).is_err());
        assert!(PredictionLog::new(t.clone(), vec![0, 1]).is_err());
        let bad = Tensor::from_rows(&[vec![0.6, 0.6]]).unwrap();
        assert!(PredictionLog::new(bad, vec![0]).is_err());
        assert!(PredictionLog::new(t, vec![0]).is_ok());
    }

    #[test]
    fn perfect_confident_log_has_zero_ece() {
        let log = log_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], &[0, 1, 0]);
        assert_eq!(ece(&log, 10).unwrap(), 0.0);
        assert_eq!(accuracy(&log).unwrap(), 1.0);
    }

    #[test]
    fn single_bin_ece_formula() {
        // Two samples, confidence 0.9 each, one correct: acc 0.5, conf 0.9.
        let log = log_from(&[vec![0.9, 0.1], vec![0.9, 0.1]], &[0, 1]);
        assert!((ece(&log, 1).unwrap() - 0.4).abs() < 1e-12);
        // M = 1 identity against overall statistics.
        let acc = accuracy(&log).unwrap();
        let mean_conf = (0..2).map(|i| log.confidence(i)).sum::<f64>() / 2.0;
        assert!((ece(&log, 1).unwrap() - (acc - mean_conf).abs()) < 1e-15);
    }

    #[test]
    fn two_equal_bins_average_their_gaps() {
        // With M=4 the 0.6-confidence pair lands in [0.5, 0.75) at accuracy
        // 0.5 (gap 0.1) and the 0.8 pair in [0.75, 1] at accuracy 0.5
        // (gap 0.3); equal weights average to 0.2.
        let log = log_from(
            &[
                vec![0.6, 0.4],
                vec![0.6, 0.4],
                vec![0.8, 0.2],
                vec![0.8, 0.2],
            ],
            &[0, 1, 0, 1],
        );
        assert!((ece(&log, 4).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn edge_confidence_goes_to_upper_bin() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.2999999, 10), 2);
        // Edges built as k/m match confidences built the same way.
        for m in [1, 2, 3, 7, 10] {
            for k in 0..m {
                let edge = k as f64 / m as f64;
                assert_eq!(bin_index(edge, m), k, "edge {k}/{m}");
            }
        }
    }

    #[test]
    fn reliability_counts_sum_to_n() {
        let log = log_from(
            &[vec![0.55, 0.45], vec![0.75, 0.25], vec![0.95, 0.05], vec![0.51, 0.49]],
            &[0, 0, 1, 1],
        );
        let bins = reliability(&log, 10).unwrap();
        assert_eq!(bins.counts.iter().sum::<usize>(), 4);
        assert_eq!(bins.edges.len(), 11);
        for b in 0..10 {
            if bins.counts[b] == 0 {
                assert!(bins.mean_confidence[b].is_none());
                assert!(bins.accuracy[b].is_none());
            }
        }
        assert!(matches!(
            reliability(&log_from(&[vec![1.0, 0.0]], &[0]), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_log_is_rejected() {
        let probs = Tensor::new(vec![0, 2], vec![]).unwrap();
        let log = PredictionLog::new(probs, vec![]).unwrap();
        assert!(matches!(ece(&log, 10), Err(Error::EmptyLog)));
        assert!(matches!(classification_metrics(&log), Err(Error::EmptyLog)));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let log = log_from(
            &[vec![0.9, 0.05, 0.05], vec![0.1, 0.8, 0.1], vec![0.2, 0.1, 0.7]],
            &[0, 1, 2],
        );
        let m = classification_metrics(&log).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.top1_error, 0.0);
        assert_eq!(m.top5_error, 0.0);
        for c in &m.per_class {
            assert_eq!(c.precision, Some(1.0));
            assert_eq!(c.recall, Some(1.0));
            assert_eq!(c.f1, Some(1.0));
            assert_eq!(c.auc, Some(1.0));
        }
        assert_eq!(m.macro_f1, Some(1.0));
        assert_eq!(m.macro_auc, Some(1.0));
    }

    #[test]
    fn textbook_confusion_cell() {
        // Class 0: TP=1 (row 0), FP=1 (row 1), FN=0 → precision 0.5,
        // recall 1, F1 2/3.
        let log = log_from(&[vec![0.9, 0.1], vec![0.8, 0.2]], &[0, 1]);
        let m = classification_metrics(&log).unwrap();
        let c0 = &m.per_class[0];
        assert_eq!(c0.precision, Some(0.5));
        assert_eq!(c0.recall, Some(1.0));
        assert!((c0.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // Class 1 never predicted: precision absent, recall 0.
        let c1 = &m.per_class[1];
        assert_eq!(c1.precision, None);
        assert_eq!(c1.recall, Some(0.0));
        assert_eq!(c1.f1, None);
        // Macro precision averages only the defined class.
        assert_eq!(m.macro_precision, Some(0.5));
    }

    #[test]
    fn random_scores_give_half_auc() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let n = 4000;
        let mut rows = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for i in 0..n {
            let p: f64 = rng.gen_range(0.01..0.99);
            rows.push(vec![p, 1.0 - p]);
            truth.push(i % 2);
        }
        let m = classification_metrics(&log_from(&rows, &truth)).unwrap();
        let auc = m.per_class[0].auc.unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc = {auc}");
    }

    #[test]
    fn auc_handles_ties_with_average_ranks() {
        // Scores: pos {0.8, 0.5}, neg {0.5, 0.2}. The tie at 0.5 contributes
        // half: AUC = (1 + 1 + 1 + 0.5·... ) → pairs: (0.8>0.5)=1,
        // (0.8>0.2)=1, (0.5~0.5)=0.5, (0.5>0.2)=1 → 3.5/4.
        let auc = rank_auc(&[0.8, 0.5, 0.5, 0.2], &[true, true, false, false]).unwrap();
        assert!((auc - 3.5 / 4.0).abs() < 1e-15);
        assert_eq!(rank_auc(&[0.5], &[true]), None);
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let rows = vec![
            vec![0.55, 0.45],
            vec![0.95, 0.05],
            vec![0.62, 0.38],
            vec![0.71, 0.29],
            vec![0.84, 0.16],
        ];
        let truth = vec![0, 1, 0, 1, 0];
        let base = ece(&log_from(&rows, &truth), 10).unwrap();
        let perm = [4, 2, 0, 3, 1];
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let truth_p: Vec<usize> = perm.iter().map(|&i| truth[i]).collect();
        let shuffled = ece(&log_from(&rows_p, &truth_p), 10).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn top5_counts_rank_with_ties() {
        // C = 6 so top-5 can actually miss.
        let mut row = vec![0.3, 0.2, 0.15, 0.15, 0.1, 0.1];
        let log = log_from(&[row.clone()], &[5]);
        let m = classification_metrics(&log).unwrap();
        // Class 5 ties class 4 at 0.1; five classes rank ahead of it.
        assert_eq!(m.top5_error, 1.0);
        row.swap(0, 5);
        let log = log_from(&[row], &[5]);
        let m = classification_metrics(&log).unwrap();
        assert_eq!(m.top5_error, 0.0);
    }
}
