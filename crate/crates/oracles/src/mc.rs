//! Monte Carlo summaries.

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

pub fn variance(xs: &[f64]) -> f64 {
    let (m, se) = mean_stderr(xs);
    let _ = m;
    se * se * xs.len() as f64
}

/// Standard error of a frequency estimate `p` from `n` Bernoulli draws.
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
