//! Central finite-difference gradient checking.

use crate::graph::{Graph, Result, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` where the relative error peaked.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative errors are measured against at least this magnitude, so entries
/// whose true gradient is essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h * max(1, |x|)` in every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let mut rep = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data[j];
            let step = h * x0.abs().max(1.0);
            xs[i].data[j] = x0 + step;
            let fp = eval(&xs)?;
            xs[i].data[j] = x0 - step;
            let fm = eval(&xs)?;
            xs[i].data[j] = x0;
            let num = (fp - fm) / (2.0 * step);
            let an = analytic[i][j];
            let abs = (an - num).abs();
            let rel = abs / an.abs().max(num.abs()).max(REL_FLOOR);
            rep.checked += 1;
            rep.max_abs_err = rep.max_abs_err.max(abs);
            if rel > rep.max_rel_err || !rel.is_finite() {
                rep.max_rel_err = rel;
                rep.worst = (i, j);
            }
        }
    }
    Ok(rep)
}
