use super::AdapterError;

/// Normalized train-holdout contrast gap, `|train - test| / max(1e-8, |train|)`.
pub fn gap(train_contrast_mean: f64, test_contrast_mean: f64) -> f64 {
    (train_contrast_mean - test_contrast_mean).abs() / train_contrast_mean.abs().max(1e-8)
}

/// Usable-support flag: coverage in `[0.10, 0.60]` and the smaller arm (or
/// selected set) holds at least five rows.
pub fn usable_support(coverage: f64, min_count: usize) -> bool {
    (0.10..=0.60).contains(&coverage) && min_count >= 5
}

/// Two-proportion Wald standard error.
pub fn wald_se(p0: f64, n0: usize, p1: f64, n1: usize) -> f64 {
    (p0 * (1.0 - p0) / n0 as f64 + p1 * (1.0 - p1) / n1 as f64).sqrt()
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Percent of pairs whose train and holdout signs agree, over pairs with
/// both sides present. `None` when no pair is comparable.
pub fn direction_consistency(pairs: &[(Option<f64>, Option<f64>)]) -> Option<f64> {
    let both: Vec<(f64, f64)> = pairs.iter().filter_map(|&(a, b)| Some((a?, b?))).collect();
    if both.is_empty() {
        return None;
    }
    let hits = both.iter().filter(|(a, b)| sign(*a) == sign(*b)).count();
    Some(100.0 * hits as f64 / both.len() as f64)
}

/// Step-wise average precision. Scores are visited in descending order with
/// tied scores forming one threshold; each threshold adds its precision
/// times the recall it gains.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, AdapterError> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(AdapterError::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut gained = 0usize;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
                gained += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if gained > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (gained as f64 / positives as f64);
        }
    }
    Ok(ap)
}
