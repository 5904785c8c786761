//! Forward equations of a single position's DROP -> MASK -> clean chain.

use crate::ode::{graded_grid, rk4};
use lflex_core::kuma::{hazard, KumaParams};
use lflex_core::Result;

/// Start of integration; the chain is taken to be all-DROP here.
pub const T_START: f64 = 1e-16;

/// Integrate `d/dt (drop, mask, clean)` with hazards `λ_ins(t)`, `λ_un(t)` and
/// return the state at each requested time (each in `(0, 1)`).
pub fn single_position(p: &KumaParams, times: &[f64], per_side: usize) -> Result<Vec<[f64; 3]>> {
    single_position_with(|t, a, b| hazard(t, a, b).unwrap_or(f64::NAN), p, times, per_side)
}

/// [`single_position`] with a caller-supplied hazard `h(t, a, b)`.
pub fn single_position_with<H>(h: H, p: &KumaParams, times: &[f64], per_side: usize) -> Result<Vec<[f64; 3]>>
where
    H: Fn(f64, f64, f64) -> f64,
{
    p.validate()?;
    let t_end = times.iter().cloned().fold(0.5, f64::max);
    let grid = graded_grid(T_START, t_end, per_side, times);
    let grid: Vec<f64> = grid.into_iter().filter(|&t| t <= t_end).collect();
    let rhs = |t: f64, y: &[f64]| {
        let li = h(t, p.a, p.b_ins);
        let lu = h(t, p.a, p.b_un);
        vec![-li * y[0], li * y[0] - lu * y[1], lu * y[1]]
    };
    let ys = rk4(rhs, &[1.0, 0.0, 0.0], &grid);
    Ok(times
        .iter()
        .map(|t| {
            let k = grid.iter().position(|g| g == t).expect("time merged into grid");
            [ys[k][0], ys[k][1], ys[k][2]]
        })
        .collect())
}
