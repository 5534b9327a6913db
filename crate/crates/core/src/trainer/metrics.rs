//! Ranking metrics: average gold rank R, Dif, and top-k hit rates.

use serde::{Deserialize, Serialize};

/// Option indices by score descending; equal scores keep their original order.
pub fn rank_options(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// 1-based rank of `gold`. Options scoring equal to gold count as ahead of it,
/// so option order can never help gold.
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores.iter().enumerate().filter(|&(o, &s)| o != gold && s >= g).count()
}

/// Gold score minus the mean score of the other options; `None` for a lone option.
pub fn dif(scores: &[f64], gold: usize) -> Option<f64> {
    if scores.len() < 2 {
        return None;
    }
    let others: f64 = scores.iter().enumerate().filter(|&(o, _)| o != gold).map(|(_, s)| s).sum();
    Some(scores[gold] - others / (scores.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(rename = "R")]
    pub avg_rank: f64,
    #[serde(rename = "Dif")]
    pub avg_dif: f64,
    pub top1: f64,
    pub top3: f64,
    pub slots: usize,
    /// Slots contributing to Dif (those with at least two options).
    pub dif_slots: usize,
}

/// Running sums for [`EvalMetrics`].
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    rank_sum: f64,
    dif_sum: f64,
    top1: usize,
    top3: usize,
    slots: usize,
    dif_slots: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, scores: &[f64], gold: usize) {
        let r = gold_rank(scores, gold);
        self.rank_sum += r as f64;
        self.top1 += usize::from(r <= 1);
        self.top3 += usize::from(r <= 3);
        self.slots += 1;
        if let Some(d) = dif(scores, gold) {
            self.dif_sum += d;
            self.dif_slots += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.rank_sum += other.rank_sum;
        self.dif_sum += other.dif_sum;
        self.top1 += other.top1;
        self.top3 += other.top3;
        self.slots += other.slots;
        self.dif_slots += other.dif_slots;
    }

    /// All-zero metrics when nothing was added.
    pub fn finish(&self) -> EvalMetrics {
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        EvalMetrics {
            avg_rank: per(self.rank_sum, self.slots),
            avg_dif: per(self.dif_sum, self.dif_slots),
            top1: per(self.top1 as f64, self.slots),
            top3: per(self.top3 as f64, self.slots),
            slots: self.slots,
            dif_slots: self.dif_slots,
        }
    }
}

/// Metrics over `(scores, gold)` pairs.
pub fn metrics_from_scores<'a, I>(slots: I) -> EvalMetrics
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut acc = MetricsAccumulator::default();
    for (scores, gold) in slots {
        acc.add(scores, gold);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_options(&[0.2, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_options(&[0.3; 4]), vec![0, 1, 2, 3]);
        assert_eq!(gold_rank(&[0.2, 0.9, 0.5], 0), 3);
        assert_eq!(gold_rank(&[0.5, 0.5, 0.1], 0), 2);
    }

    #[test]
    fn dif_fixture() {
        let mut scores = vec![0.2; 50];
        scores[0] = 1.0;
        let m = metrics_from_scores([(scores.as_slice(), 0)]);
        assert!((m.avg_dif - 0.8).abs() < 1e-12);
        assert_eq!(m.avg_rank, 1.0);
        assert_eq!(dif(&[0.7], 0), None);
    }

    #[test]
    fn gold_last() {
        let scores: Vec<f64> = (0..50).map(|i| 1.0 - i as f64 / 50.0).collect();
        let m = metrics_from_scores([(scores.as_slice(), 49)]);
        assert_eq!(m.avg_rank, 50.0);
        assert_eq!(m.top3, 0.0);
    }

    #[test]
    fn single_option_slot_is_rank_one_without_dif() {
        let m = metrics_from_scores([(&[0.1][..], 0), (&[0.9, 0.1][..], 0)]);
        assert_eq!(m.avg_rank, 1.0);
        assert_eq!(m.dif_slots, 1);
        assert!((m.avg_dif - 0.8).abs() < 1e-15);
    }

    #[test]
    fn serializes_with_short_names() {
        let m = metrics_from_scores([(&[0.9, 0.1][..], 0)]);
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        assert!(v.get("R").is_some() && v.get("Dif").is_some() && v.get("top3").is_some());
    }
}
