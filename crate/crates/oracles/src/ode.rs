//! Classical fourth-order Runge-Kutta on an explicit time grid.

/// Integrate `dy/dt = f(t, y)` along `grid` (increasing), returning the state
/// at every grid point (the first entry is `y0`).
pub fn rk4<F>(f: F, y0: &[f64], grid: &[f64]) -> Vec<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let mut out = Vec::with_capacity(grid.len());
    let mut y = y0.to_vec();
    out.push(y.clone());
    let axpy = |y: &[f64], k: &[f64], h: f64| y.iter().zip(k).map(|(a, b)| a + h * b).collect::<Vec<_>>();
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &axpy(&y, &k1, h / 2.0));
        let k3 = f(t + h / 2.0, &axpy(&y, &k2, h / 2.0));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(y.clone());
    }
    out
}

/// Grid on `[t0, t1]` that is geometric near both ends, so hazards that blow
/// up like `t^{a-1}` at 0 or `1/(1-t)` at 1 are resolved. `extra` times are
/// merged in exactly.
pub fn graded_grid(t0: f64, t1: f64, per_side: usize, extra: &[f64]) -> Vec<f64> {
    let mid: f64 = 0.5;
    let mut g = Vec::with_capacity(2 * per_side + extra.len() + 2);
    let (lo, hi) = (t0.ln(), mid.ln());
    for k in 0..=per_side {
        g.push((lo + (hi - lo) * k as f64 / per_side as f64).exp());
    }
    let (lo, hi) = ((1.0 - mid).ln(), (1.0 - t1).ln());
    for k in 1..=per_side {
        g.push(1.0 - (lo + (hi - lo) * k as f64 / per_side as f64).exp());
    }
    g.extend(extra.iter().copied().filter(|&x| x > t0 && x < t1));
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}
