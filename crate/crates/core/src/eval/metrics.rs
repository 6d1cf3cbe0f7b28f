//! Confusion matrices, the staging metric suite and rank-based AUC.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Rows are reference classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        assert!(labels.len() >= 2, "a confusion matrix needs at least two classes");
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Classes named `0..k`.
    pub fn with_classes(k: usize) -> Self {
        Self::new((0..k).map(|i| i.to_string()).collect())
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let k = counts.len();
        assert!(counts.iter().all(|r| r.len() == k), "confusion matrix must be square");
        let mut cm = Self::with_classes(k);
        cm.counts = counts;
        cm
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("reference\\predicted,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&format!("{label},{}\n", cells.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    /// Macro-averaged recall.
    pub sensitivity: f64,
    /// Macro-averaged one-vs-rest true-negative rate.
    pub specificity: f64,
    pub per_class_f1: Vec<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Accuracy, Cohen's kappa, macro F1, macro sensitivity and specificity.
///
/// Undefined per-class quantities (no support, no predictions) count as 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let k = cm.k();
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(EvalError::EmptyMatrix);
    }
    let c = |i: usize, j: usize| cm.counts[i][j] as f64;
    let row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| c(i, j)).sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c(i, j)).sum()).collect();
    let trace: f64 = (0..k).map(|i| c(i, i)).sum();
    let p_o = trace / n;
    let p_e: f64 = (0..k).map(|i| row[i] * col[i]).sum::<f64>() / (n * n);
    let kappa = if p_e < 1.0 { (p_o - p_e) / (1.0 - p_e) } else { 1.0 };
    let mut per_class_f1 = Vec::with_capacity(k);
    let (mut sens, mut spec) = (0.0, 0.0);
    for i in 0..k {
        if row[i] == 0.0 {
            log::warn!("class {} has no support; its F1 counts as 0", cm.labels[i]);
        }
        let tp = c(i, i);
        let fp = col[i] - tp;
        let fn_ = row[i] - tp;
        let tn = n - tp - fp - fn_;
        per_class_f1.push(ratio(2.0 * tp, 2.0 * tp + fp + fn_));
        sens += ratio(tp, tp + fn_);
        spec += ratio(tn, tn + fp);
    }
    Ok(Metrics {
        acc: p_o,
        kappa,
        macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
        sensitivity: sens / k as f64,
        specificity: spec / k as f64,
        per_class_f1,
    })
}

/// ROC-AUC as the Mann-Whitney statistic, ties counted one half (via midranks).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::NoLabels("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
