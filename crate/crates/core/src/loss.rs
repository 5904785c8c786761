//! Rate-matching losses evaluated on plain floats, plus the schedule
//! regularizer and the leave-one-out surrogate. The differentiable versions in
//! the model crate are checked against these.

use crate::error::{check_positive, CoreError, Result};
use crate::kuma::KumaParams;
use crate::rates::GeneratorOutput;
use crate::target_rates::TargetRateBundle;
use serde::{Deserialize, Serialize};

/// Floor applied to model rates before taking logs.
pub const RATE_FLOOR: f64 = 1e-8;

/// `D(λt, λm) = λt ln(λt/λm) - λt + λm`, with `0 ln 0 = 0`.
pub fn rate_divergence(target: f64, model: f64) -> Result<f64> {
    if !(target >= 0.0) || !target.is_finite() {
        return Err(CoreError::Domain {
            what: "target rate",
            value: target,
            expected: "finite and >= 0",
        });
    }
    check_positive("model rate", model)?;
    if target == 0.0 {
        return Ok(model);
    }
    Ok(target * (target / model).ln() - target + model)
}

/// [`rate_divergence`] with the model rate floored at [`RATE_FLOOR`] inside
/// the log only, so a zero model rate against a zero target costs nothing.
pub fn rate_divergence_floored(target: f64, model: f64) -> Result<f64> {
    if !(model >= 0.0) || !model.is_finite() {
        return Err(CoreError::Domain {
            what: "model rate",
            value: model,
            expected: "finite and >= 0",
        });
    }
    if target == 0.0 {
        return Ok(model);
    }
    let d = rate_divergence(target, model.max(RATE_FLOOR))?;
    Ok(d - model.max(RATE_FLOOR) + model)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub unmask: f64,
    pub insert: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.unmask + self.insert
    }
}

/// Bregman rate-matching loss of one partial sequence at one time.
pub fn example_loss(target: &TargetRateBundle, gen: &GeneratorOutput) -> Result<LossTerms> {
    let n = target.unmask.len();
    if gen.lam_un.len() != n || gen.lam_ins.len() != n + 1 || gen.k_probs.len() != n || target.insert.len() != n + 1 {
        return Err(CoreError::Shape(format!(
            "generator output for {} positions, target for {}",
            gen.lam_un.len(),
            n
        )));
    }
    let mut terms = LossTerms::default();
    for i in 0..n {
        if let Some(y) = target.targets[i] {
            let lt = target.unmask[i];
            let k = gen.k_probs[i][y as usize].max(f64::MIN_POSITIVE);
            terms.unmask += rate_divergence_floored(lt, gen.lam_un[i])? - lt * k.ln();
        }
    }
    for (lt, lm) in target.insert.iter().zip(&gen.lam_ins) {
        terms.insert += rate_divergence_floored(*lt, *lm)?;
    }
    Ok(terms)
}

/// Settings of the schedule regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub t_eps: f64,
    pub delta: f64,
    pub grid_points: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            t_eps: 0.01,
            delta: 0.01,
            grid_points: 16,
        }
    }
}

/// Midpoint grid on `[0, 1]` with equal weights summing to one.
pub fn uniform_grid(k: usize) -> (Vec<f64>, Vec<f64>) {
    let pts = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
    (pts, vec![1.0 / k as f64; k])
}

/// Value of the regularizer and its gradient with respect to every
/// position's `b_ins` and `b_un`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegGrad {
    pub value: f64,
    pub d_b_ins: Vec<f64>,
    pub d_b_un: Vec<f64>,
}

/// Pull the averaged insertion and unmasking CDFs toward the identity on the
/// grid, and penalize schedules that put more than `delta` mass within
/// `t_eps` of either endpoint. Endpoint penalties are averaged over
/// positions. `params` should hold only non-pad positions.
pub fn schedule_reg_grad(params: &[KumaParams], grid: &[f64], weights: &[f64], cfg: &RegConfig) -> Result<RegGrad> {
    if grid.len() != weights.len() {
        return Err(CoreError::Shape("grid and weights differ in length".into()));
    }
    let m = params.len();
    let mut out = RegGrad {
        value: 0.0,
        d_b_ins: vec![0.0; m],
        d_b_un: vec![0.0; m],
    };
    if m == 0 {
        return Ok(out);
    }
    for p in params {
        p.validate()?;
    }
    let inv_m = 1.0 / m as f64;
    let log_surv = |t: f64, a: f64| (-t.powf(a)).ln_1p();
    for which in 0..2 {
        let b = |p: &KumaParams| if which == 0 { p.b_ins } else { p.b_un };
        let mut grad = vec![0.0; m];
        for (&tk, &wk) in grid.iter().zip(weights) {
            let mut mix = 0.0;
            for p in params {
                mix += -(b(p) * log_surv(tk, p.a)).exp_m1();
            }
            mix *= inv_m;
            let r = mix - tk;
            out.value += wk * r * r;
            for (g, p) in grad.iter_mut().zip(params) {
                let c = log_surv(tk, p.a);
                *g += 2.0 * wk * r * inv_m * (-c * (b(p) * c).exp());
            }
        }
        for (g, p) in grad.iter_mut().zip(params) {
            let c_lo = log_surv(cfg.t_eps, p.a);
            let f_lo = -(b(p) * c_lo).exp_m1();
            let h_lo = (f_lo - cfg.delta).max(0.0);
            let c_hi = log_surv(1.0 - cfg.t_eps, p.a);
            let s_hi = (b(p) * c_hi).exp();
            let h_hi = (s_hi - cfg.delta).max(0.0);
            out.value += inv_m * (h_lo * h_lo + h_hi * h_hi);
            *g += inv_m * (2.0 * h_lo * (-c_lo * (b(p) * c_lo).exp()) + 2.0 * h_hi * c_hi * s_hi);
        }
        if which == 0 {
            out.d_b_ins = grad;
        } else {
            out.d_b_un = grad;
        }
    }
    Ok(out)
}

pub fn schedule_reg(params: &[KumaParams], grid: &[f64], weights: &[f64], cfg: &RegConfig) -> Result<f64> {
    schedule_reg_grad(params, grid, weights, cfg).map(|r| r.value)
}

/// Leave-one-out surrogate for two draws. Its value is the mean loss; its
/// gradient with respect to the schedule parameters adds the score-function
/// term `(L1 - L2)(∇ln p1 - ∇ln p2)/2`, where the loss difference is treated
/// as a constant.
pub fn loo_surrogate(l1: f64, l2: f64, logp1: f64, logp2: f64) -> f64 {
    0.5 * ((l1 - l2) * (logp1 - logp2) + l1 + l2)
}
