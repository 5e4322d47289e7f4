use super::{EvalError, Result};

/// One scored example: fake-probability in [0, 1] plus the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub score: f64,
    pub label: u8,
    pub source_id: String,
}

impl ScoredItem {
    pub fn new(score: f64, label: u8, source_id: impl Into<String>) -> Self {
        Self {
            score,
            label,
            source_id: source_id.into(),
        }
    }
}

/// Rank-based average precision with the fake class as positive:
/// sort by descending score (ties broken by ascending source id), then
/// average precision-at-rank over the positive positions.
pub fn average_precision(items: &[ScoredItem]) -> Result<f64> {
    let positives = items.iter().filter(|i| i.label == 1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut sorted: Vec<&ScoredItem> = items.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.source_id.cmp(&b.source_id))
    });

    let mut true_positives = 0usize;
    let mut ap = 0.0f64;
    for (rank0, item) in sorted.iter().enumerate() {
        if item.label == 1 {
            true_positives += 1;
            ap += true_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Fraction classified correctly with the rule `score >= threshold ⇒ fake`.
pub fn accuracy_at_threshold(items: &[ScoredItem], threshold: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(EvalError::EmptyItems);
    }
    let correct = items
        .iter()
        .filter(|i| (i.score >= threshold) == (i.label == 1))
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// Unweighted arithmetic mean of per-dataset average precisions.
pub fn mean_ap(aps: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ap in aps {
        sum += ap;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
