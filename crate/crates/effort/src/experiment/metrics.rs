use crate::error::{invalid, Result};

/// P(score of a random positive > score of a random negative), ties counted ½.
/// Computed from mid-ranks, which equals the pairwise count exactly for these inputs.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("roc_auc scores contain NaN");
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != labels.len() {
        return invalid("roc_auc labels must be 0 or 1");
    }
    if pos == 0 || neg == 0 {
        return invalid("roc_auc needs both classes present");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Mann–Whitney U from doubled mid-ranks, kept integral so the result is exact
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i+j+2)/2
        let mid2 = (i + j + 2) as u128;
        let pos_here = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_pos += mid2 * pos_here;
        i = j + 1;
    }
    let (p, q) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Fraction of samples where (p ≥ 0.5) agrees with the label.
pub fn accuracy_at_half(probs: &[f64], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return invalid(format!("accuracy needs matching non-empty inputs, got {} and {}", probs.len(), labels.len()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("probabilities must lie in [0, 1]");
    }
    let hits = probs.iter().zip(labels).filter(|(p, y)| usize::from(**p >= 0.5) == **y).count();
    Ok(hits as f64 / probs.len() as f64)
}
