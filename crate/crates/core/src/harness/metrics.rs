//! Accuracy and rank-statistic AUC.

/// Fraction of `scores` on the right side of `threshold`; ties go to class 1.
pub fn accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &y)| (s >= threshold) == (y >= 0.5))
        .count();
    hits as f64 / scores.len() as f64
}

/// Area under the ROC curve via the Mann–Whitney statistic with average
/// ranks for ties. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] >= 0.5).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Sample- and frame-level scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub auc: Option<f64>,
    /// Mean over the two modalities.
    pub frame_acc: f64,
    pub frame_auc: Option<f64>,
}

impl Metrics {
    pub const HEADER: &'static str = "acc,auc,frame_acc,frame_auc";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        format!("{:.6},{},{:.6},{}", self.acc, opt(self.auc), self.frame_acc, opt(self.frame_auc))
    }
}
