//! Kumaraswamy order schedules.
//!
//! A position's insertion time and unmasking time are Kumaraswamy distributed
//! with a shared shape `a` and per-position rates `b_ins`, `b_un`. Everything
//! here is closed form; `(1 - t^a)^b` is always evaluated as
//! `exp(b * ln1p(-t^a))`.

use crate::error::{check_positive, check_unit, CoreError, Result};
use serde::{Deserialize, Serialize};

/// Lower clamp applied to times before any hazard evaluation.
pub const T_MIN: f64 = 1e-4;
/// Upper clamp applied to times before any hazard evaluation.
pub const T_MAX: f64 = 1.0 - 1e-4;
/// Below this `|b_ins - b_un|` the masked integral uses its log-branch expansion.
pub const EPS_BRANCH: f64 = 1e-6;

pub fn clamp_time(t: f64) -> f64 {
    t.clamp(T_MIN, T_MAX)
}

/// Schedule parameters for one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KumaParams {
    pub a: f64,
    pub b_ins: f64,
    pub b_un: f64,
}

impl KumaParams {
    pub fn new(a: f64, b_ins: f64, b_un: f64) -> Result<Self> {
        check_positive("a", a)?;
        check_positive("b_ins", b_ins)?;
        check_positive("b_un", b_un)?;
        Ok(Self { a, b_ins, b_un })
    }

    /// Linear schedule used by fixed-order baselines: `a = b_ins = b_un = 1`.
    pub const fn linear() -> Self {
        Self {
            a: 1.0,
            b_ins: 1.0,
            b_un: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.a, self.b_ins, self.b_un).map(|_| ())
    }
}

/// Marginal state probabilities of one position at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateProbs {
    pub drop: f64,
    pub mask: f64,
    pub unmasked: f64,
}

/// Which of the three per-position states a token is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosState {
    Drop,
    Mask,
    Clean,
}

/// `ln(1 - t^a)`, i.e. the log survival for `b = 1`.
fn log_surv_unit(t: f64, a: f64) -> f64 {
    (-t.powf(a)).ln_1p()
}

/// `F(t; a, b) = 1 - (1 - t^a)^b`.
pub fn cdf(t: f64, a: f64, b: f64) -> Result<f64> {
    check_unit("t", t)?;
    check_positive("a", a)?;
    check_positive("b", b)?;
    Ok(-(b * log_surv_unit(t, a)).exp_m1())
}

/// `(1 - t^a)^b`.
pub fn survival(t: f64, a: f64, b: f64) -> Result<f64> {
    check_unit("t", t)?;
    check_positive("a", a)?;
    check_positive("b", b)?;
    Ok((b * log_surv_unit(t, a)).exp())
}

/// Inverse CDF: `(1 - (1 - u)^{1/b})^{1/a}`.
pub fn inv_cdf(u: f64, a: f64, b: f64) -> Result<f64> {
    check_unit("u", u)?;
    check_positive("a", a)?;
    check_positive("b", b)?;
    let base = -((-u).ln_1p() / b).exp_m1();
    Ok(base.clamp(0.0, 1.0).powf(1.0 / a))
}

/// Draw from the schedule conditioned on exceeding `s`, by inverting the
/// truncated CDF `u (1 - F(s)) + F(s)`. Works in survival space so the result
/// never falls below `s`.
pub fn trunc_sample(s: f64, a: f64, b: f64, u: f64) -> Result<f64> {
    check_unit("s", s)?;
    check_unit("u", u)?;
    check_positive("a", a)?;
    check_positive("b", b)?;
    let log_one_minus_ta = (-u).ln_1p() / b + log_surv_unit(s, a);
    let ta = -log_one_minus_ta.exp_m1();
    Ok(ta.clamp(0.0, 1.0).powf(1.0 / a).max(s))
}

/// Shape-only hazard `a t^{a-1} / (1 - t^a)`; the full hazard is `b` times this.
pub fn hazard_shape(t: f64, a: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(CoreError::Domain {
            what: "t",
            value: t,
            expected: "[0, 1)",
        });
    }
    check_positive("a", a)?;
    if t == 0.0 {
        return Ok(if a > 1.0 {
            0.0
        } else if a == 1.0 {
            1.0
        } else {
            f64::INFINITY
        });
    }
    let denom = -(a * t.ln()).exp_m1();
    Ok(a * t.powf(a - 1.0) / denom)
}

/// Hazard `f(t)/(1 - F(t)) = b a t^{a-1} / (1 - t^a)`.
pub fn hazard(t: f64, a: f64, b: f64) -> Result<f64> {
    check_positive("b", b)?;
    Ok(b * hazard_shape(t, a)?)
}

/// `g(d) = -expm1(d c) / d` with its `d -> 0` limit `-c`; the masked integral
/// is `b_ins * g(b_ins - b_un)` with `c = ln(1 - t^a)`.
fn g_value(c: f64, d: f64) -> f64 {
    if d.abs() < EPS_BRANCH {
        -c * (1.0 + 0.5 * d * c)
    } else {
        -(d * c).exp_m1() / d
    }
}

/// `d/dd ln g(d)`. With `x = d c`, this is `c * exprel'(x) / exprel(x)` where
/// `exprel(x) = expm1(x)/x`.
fn g_log_deriv(c: f64, d: f64) -> f64 {
    let x = d * c;
    if x.abs() < 1e-2 {
        let num = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x * (1.0 / 144.0 + x / 840.0))));
        let den = 1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x * (1.0 / 120.0 + x / 720.0))));
        c * num / den
    } else {
        let em1 = x.exp_m1();
        let exprel = em1 / x;
        let dexprel = (x * x.exp() - em1) / (x * x);
        c * dexprel / exprel
    }
}

/// `I(t) = ∫_0^t f_ins(s) / (1 - F_un(s)) ds`.
///
/// Equals `b_ins/(b_ins - b_un) * (1 - (1 - t^a)^{b_ins - b_un})` and
/// `-b_ins ln(1 - t^a)` when the rates coincide. Diverges at `t = 1` unless
/// `b_ins > b_un`.
pub fn masked_integral(t: f64, p: &KumaParams) -> Result<f64> {
    check_unit("t", t)?;
    p.validate()?;
    let c = log_surv_unit(t, p.a);
    Ok(p.b_ins * g_value(c, p.b_ins - p.b_un))
}

/// `(p_drop, p_mask, p_unmasked)` at time `t`.
pub fn state_probs(t: f64, p: &KumaParams) -> Result<StateProbs> {
    check_unit("t", t)?;
    p.validate()?;
    if t == 1.0 {
        return Ok(StateProbs {
            drop: 0.0,
            mask: 0.0,
            unmasked: 1.0,
        });
    }
    let c = log_surv_unit(t, p.a);
    let drop = (p.b_ins * c).exp();
    let mask = (p.b_un * c).exp() * p.b_ins * g_value(c, p.b_ins - p.b_un);
    let unmasked = (1.0 - drop - mask).max(0.0);
    Ok(StateProbs { drop, mask, unmasked })
}

/// Log-probability of one state together with its partial derivatives with
/// respect to `(b_ins, b_un)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbGrad {
    pub logp: f64,
    pub d_b_ins: f64,
    pub d_b_un: f64,
}

/// `ln P(state at t)` and its analytic gradient with respect to the rates.
/// Returns `-inf` (with zero gradient) for states of probability zero.
pub fn state_log_prob(state: PosState, t: f64, p: &KumaParams) -> Result<LogProbGrad> {
    check_unit("t", t)?;
    p.validate()?;
    let neg_inf = LogProbGrad {
        logp: f64::NEG_INFINITY,
        d_b_ins: 0.0,
        d_b_un: 0.0,
    };
    if t == 1.0 {
        return Ok(match state {
            PosState::Clean => LogProbGrad {
                logp: 0.0,
                d_b_ins: 0.0,
                d_b_un: 0.0,
            },
            _ => neg_inf,
        });
    }
    let c = log_surv_unit(t, p.a);
    let d = p.b_ins - p.b_un;
    let g = g_value(c, d);
    let dlng = g_log_deriv(c, d);
    // ln p_mask = b_un c + ln b_ins + ln g(b_ins - b_un)
    let mask_grad = |pm: f64| (pm * (1.0 / p.b_ins + dlng), pm * (c - dlng));
    match state {
        PosState::Drop => Ok(LogProbGrad {
            logp: p.b_ins * c,
            d_b_ins: c,
            d_b_un: 0.0,
        }),
        PosState::Mask => {
            if t == 0.0 {
                return Ok(neg_inf);
            }
            Ok(LogProbGrad {
                logp: p.b_un * c + p.b_ins.ln() + g.ln(),
                d_b_ins: 1.0 / p.b_ins + dlng,
                d_b_un: c - dlng,
            })
        }
        PosState::Clean => {
            let pd = (p.b_ins * c).exp();
            let pm = (p.b_un * c).exp() * p.b_ins * g;
            let pu = 1.0 - pd - pm;
            if pu <= 0.0 {
                return Ok(neg_inf);
            }
            let (dm_ins, dm_un) = mask_grad(pm);
            Ok(LogProbGrad {
                logp: pu.ln(),
                d_b_ins: -(c * pd + dm_ins) / pu,
                d_b_un: -dm_un / pu,
            })
        }
    }
}

/// Probability that `n` positions with insertion rates `b` (and a shared
/// shape) are inserted in the order `order`, where `order[0]` is first.
/// Indices are zero-based.
pub fn order_prob(order: &[usize], b: &[f64]) -> Result<f64> {
    let n = b.len();
    if order.len() != n {
        return Err(CoreError::NotPermutation { n });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(CoreError::NotPermutation { n });
        }
        seen[i] = true;
    }
    for &bi in b {
        check_positive("b", bi)?;
    }
    let mut tail: f64 = b.iter().sum();
    let mut prob = 1.0;
    for &i in order {
        prob *= b[i] / tail;
        tail -= b[i];
    }
    Ok(prob)
}
