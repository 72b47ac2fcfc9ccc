//! Evaluation metrics: top-k accuracy and mean top-k recall.
//!
//! Mean top-k recall averages per-class recall over the classes present in
//! the evaluation records, so rare classes weigh as much as frequent ones.
//! Ranking ties break toward the lower class index.

/// One scored prediction paired with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prediction: Vec<f64>,
    pub target: usize,
}

impl EvalRecord {
    pub fn new(prediction: Vec<f64>, target: usize) -> Self {
        debug_assert!(
            (prediction.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "prediction must be a distribution"
        );
        debug_assert!(target < prediction.len());
        EvalRecord { prediction, target }
    }
}

/// True iff `target` ranks among the `k` highest-probability classes.
/// Ties rank the lower class index first; `k` saturates at the class count.
pub fn top_k_hit(prediction: &[f64], target: usize, k: usize) -> bool {
    debug_assert!(k >= 1);
    let better = prediction
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > prediction[target] || (p == prediction[target] && i < target))
        .count();
    better < k
}

/// Percentage of records whose target ranks within the top k.
pub fn accuracy(records: &[EvalRecord], k: usize) -> f64 {
    assert!(!records.is_empty(), "accuracy over empty records");
    let hits = records
        .iter()
        .filter(|r| top_k_hit(&r.prediction, r.target, k))
        .count();
    100.0 * hits as f64 / records.len() as f64
}

/// Mean over classes (present in the records) of per-class top-k recall,
/// as a percentage.
pub fn mean_top_k_recall(records: &[EvalRecord], k: usize) -> f64 {
    assert!(!records.is_empty(), "recall over empty records");
    let n_c = records.iter().map(|r| r.prediction.len()).max().unwrap_or(0);
    let mut totals = vec![0usize; n_c];
    let mut hits = vec![0usize; n_c];
    for r in records {
        totals[r.target] += 1;
        if top_k_hit(&r.prediction, r.target, k) {
            hits[r.target] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_c {
        if totals[c] > 0 {
            sum += hits[c] as f64 / totals[c] as f64;
            present += 1;
        }
    }
    100.0 * sum / present as f64
}
