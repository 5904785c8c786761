//! Finite differences for plain functions.

/// Central-difference gradient of `f` at `x` with step `h * max(1, |x_i|)`.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            xs[i] = x[i] + step;
            let fp = f(&xs);
            xs[i] = x[i] - step;
            let fm = f(&xs);
            xs[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
