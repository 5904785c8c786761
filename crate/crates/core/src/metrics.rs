//! Evaluation metrics for generated answers.

use crate::aug::TokenId;

pub fn exact_match(pred: &[TokenId], gold: &[TokenId]) -> bool {
    pred == gold
}

/// Matching tokens over the shorter length, divided by the gold length.
pub fn token_accuracy(pred: &[TokenId], gold: &[TokenId]) -> f64 {
    if gold.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    hits as f64 / gold.len() as f64
}

/// Pearson correlation; `None` when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Dense ranks starting at 1: equal values share a rank and the next
/// distinct value gets the next integer.
pub fn dense_ranks(v: &[usize]) -> Vec<f64> {
    let mut distinct = v.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    v.iter()
        .map(|x| (distinct.binary_search(x).unwrap_or(0) + 1) as f64)
        .collect()
}

/// Correlation between when a token was unmasked and how far it sits from
/// the junction, for one exactly matched answer. Unmask steps are turned into
/// dense ranks (tokens revealed together share a rank) scaled by answer
/// length, and distances are scaled by path length.
pub fn example_order_correlation(unmask_step: &[usize], distances: &[usize], path_len: usize) -> Option<f64> {
    if unmask_step.len() != distances.len() || path_len == 0 {
        return None;
    }
    let n = unmask_step.len() as f64;
    let r: Vec<f64> = dense_ranks(unmask_step).into_iter().map(|x| x / n).collect();
    let d: Vec<f64> = distances.iter().map(|&x| x as f64 / path_len as f64).collect();
    pearson(&r, &d)
}

/// Mean of the per-example correlations that are defined.
pub fn order_distance_correlation<'a, I>(examples: I) -> Option<f64>
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize], usize)>,
{
    let vals: Vec<f64> = examples
        .into_iter()
        .filter_map(|(u, d, p)| example_order_correlation(u, d, p))
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_reference() {
        let gold: Vec<u32> = (0..12).collect();
        let mut pred = gold.clone();
        pred[5] = 99;
        assert_abs_diff_eq!(token_accuracy(&pred, &gold), 11.0 / 12.0, epsilon = 1e-15);
        assert!(!exact_match(&pred, &gold));
        assert_eq!(token_accuracy(&gold[..6], &gold), 0.5);
        assert_eq!(token_accuracy(&[], &[]), 1.0);
    }

    #[test]
    fn ends_first_is_perfectly_anticorrelated() {
        // distances 2,2,1,1 | 1,1,2,2,3,3 ; unmask farthest first
        let d = [2, 2, 1, 1, 1, 1, 2, 2, 3, 3];
        let steps: Vec<usize> = d.iter().map(|&x| 10 * (3 - x)).collect();
        let c = example_order_correlation(&steps, &d, 5).unwrap();
        assert_abs_diff_eq!(c, -1.0, epsilon = 1e-12);
        let flipped: Vec<usize> = d.iter().map(|&x| 10 * x).collect();
        assert_abs_diff_eq!(
            example_order_correlation(&flipped, &d, 5).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert!(example_order_correlation(&[3; 10], &d, 5).is_none());
    }

    #[test]
    fn dense_ranks_share_ties() {
        assert_eq!(dense_ranks(&[5, 1, 5, 0]), vec![3.0, 2.0, 3.0, 1.0]);
    }
}
