//! Multiple-testing corrections over a family of feature-wise p-values.

/// Reject hypothesis i iff p_i ≤ alpha / K.
pub fn correct_bonferroni(pvalues: &[f64], alpha: f64) -> Vec<bool> {
    let k = pvalues.len() as f64;
    pvalues.iter().map(|&p| p <= alpha / k).collect()
}

/// Benjamini–Hochberg step-up procedure. Decisions are returned in the
/// original order.
pub fn correct_fdr_bh(pvalues: &[f64], alpha: f64) -> Vec<bool> {
    let k = pvalues.len();
    let mut sorted: Vec<f64> = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = sorted
        .iter()
        .enumerate()
        .rev()
        .find(|(i, &p)| p <= (*i + 1) as f64 / k as f64 * alpha)
        .map(|(_, &p)| p);
    match cutoff {
        Some(c) => pvalues.iter().map(|&p| p <= c).collect(),
        None => vec![false; k],
    }
}
