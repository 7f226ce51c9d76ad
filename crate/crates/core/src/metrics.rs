//! Classification metrics: accuracy, macro-F1, macro one-vs-rest AUROC with
//! midrank tie handling, and the per-class confusion matrix.

/// Evaluation summary for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when fewer than two classes appear in the split.
    pub auroc: Option<f64>,
    /// `confusion[true_class][predicted_class]`; row sums equal support.
    pub confusion: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub samples: usize,
}

impl MetricsReport {
    pub fn auroc_display(&self) -> String {
        match self.auroc {
            Some(v) => format!("{v}"),
            None => "NA".into(),
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compute the full report from per-sample class scores (rows of length
/// `num_classes`, higher = more confident) and integer labels.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> MetricsReport {
    assert_eq!(scores.len(), labels.len());
    let n = labels.len();
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let pred = argmax(row);
        confusion[label][pred] += 1;
        if pred == label {
            correct += 1;
        }
    }
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };

    // Macro F1 with the absent-class = 0 convention.
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..num_classes).map(|r| confusion[r][c]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    let macro_f1 = f1_sum / num_classes as f64;

    MetricsReport {
        accuracy,
        macro_f1,
        auroc: auroc_macro_ovr(scores, labels, num_classes),
        confusion,
        num_classes,
        samples: n,
    }
}

/// Macro one-vs-rest AUROC via the rank-sum (Mann-Whitney) statistic with
/// midranks for ties. Classes without both positives and negatives are
/// skipped; with fewer than two classes present the result is undefined.
pub fn auroc_macro_ovr(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Option<f64> {
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let n_pos = labels.iter().filter(|&&l| l == c).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| scores[a][c].total_cmp(&scores[b][c]));

        // Midranks: tied scores share the average of their 1-based ranks.
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && scores[order[j + 1]][c] == scores[order[i]][c] {
                j += 1;
            }
            let midrank = (i + 1 + j + 1) as f64 / 2.0;
            for &idx in &order[i..=j] {
                if labels[idx] == c {
                    rank_sum_pos += midrank;
                }
            }
            i = j + 1;
        }
        let auc =
            (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
        sum += auc;
        counted += 1;
    }
    (counted > 0).then(|| sum / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|c| if c == l { 0.9 } else { 0.05 }).collect())
            .collect();
        let r = evaluate_scores(&scores, &labels, 3);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.auroc, Some(1.0));
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 2, "support of class {c}");
        }
    }

    #[test]
    fn hand_counted_two_class_auroc() {
        // (score .9, y=1), (.8, y=0), (.7, y=1), (.1, y=0): 3 of 4 pairs
        // concordant -> AUC 0.75 for class 1, and symmetrically for class 0.
        let labels = vec![1, 0, 1, 0];
        let scores: Vec<Vec<f64>> =
            [0.9, 0.8, 0.7, 0.1].iter().map(|&s| vec![1.0 - s, s]).collect();
        let auc = auroc_macro_ovr(&scores, &labels, 2).unwrap();
        assert!((auc - 0.75).abs() < 1e-12, "{auc}");
    }

    #[test]
    fn ties_get_midranks() {
        // All scores identical: AUC must be exactly 0.5.
        let labels = vec![0, 1, 0, 1, 1];
        let scores = vec![vec![0.5, 0.5]; 5];
        assert_eq!(auroc_macro_ovr(&scores, &labels, 2), Some(0.5));
    }

    #[test]
    fn label_independent_scores_give_half() {
        // Permutation oracle: random scores, random labels, large n.
        let mut rng = SplitMix64::new(5);
        let n = 4000;
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(3)).collect();
        let scores: Vec<Vec<f64>> =
            (0..n).map(|_| (0..3).map(|_| rng.next_f64()).collect()).collect();
        let auc = auroc_macro_ovr(&scores, &labels, 3).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn single_class_split_is_undefined() {
        let labels = vec![1, 1, 1];
        let scores = vec![vec![0.2, 0.8]; 3];
        let r = evaluate_scores(&scores, &labels, 2);
        assert_eq!(r.auroc, None);
        assert_eq!(r.auroc_display(), "NA");
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        // Class 2 never appears and is never predicted: F1_2 = 0 by
        // convention, macro = (1 + 1 + 0) / 3.
        let labels = vec![0, 1, 0, 1];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = evaluate_scores(&scores, &labels, 3);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reports_are_deterministic() {
        let labels = vec![0, 1, 2, 1, 0];
        let scores: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..3).map(|c| ((i * 7 + c * 3) % 11) as f64 / 11.0).collect())
            .collect();
        let a = evaluate_scores(&scores, &labels, 3);
        let b = evaluate_scores(&scores, &labels, 3);
        assert_eq!(a, b);
    }
}
