//! The differentiable training objective for one clean example: two
//! corruption draws at a shared time, rate-matching losses against
//! schedule-dependent targets, the leave-one-out score term and the schedule
//! regularizer, all on one tape.

use crate::error::{ModelError, Result};
use crate::net::{AuxVars, Model};
use lflex_autodiff::{Graph, Tensor, Var};
use lflex_core::aug::{contract, AugSeq};
use lflex_core::cond_path::{log_likelihood_grad, sample_event_times, state_at};
use lflex_core::kuma::{hazard_shape, KumaParams};
use lflex_core::loss::{schedule_reg_grad, uniform_grid, RegConfig};
use lflex_core::target_rates::align;
use lflex_core::TokenId;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weights of the objective that are not network parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_reg: f64,
    pub reg: RegConfig,
}

/// Plain values of the objective's parts for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub total: f64,
    pub unmask: f64,
    pub insert: f64,
    pub reg: f64,
    pub score_abs: f64,
}

impl ObjectiveStats {
    pub fn add_scaled(&mut self, o: &ObjectiveStats, k: f64) {
        self.total += k * o.total;
        self.unmask += k * o.unmask;
        self.insert += k * o.insert;
        self.reg += k * o.reg;
        self.score_abs += k * o.score_abs;
    }
}

/// Values of the per-position schedule, read off the auxiliary outputs.
pub fn schedule_values(model: &Model, aux: &AuxVars<'_>, len: usize) -> Result<Vec<KumaParams>> {
    let a = model.cfg.a;
    let get = |v: &Option<Var<'_>>| v.map(|v| v.value().data).unwrap_or_else(|| vec![1.0; len]);
    let (bi, bu) = (get(&aux.b_ins), get(&aux.b_un));
    if bi.len() != len || bu.len() != len {
        return Err(ModelError::Data("schedule length does not match the answer".into()));
    }
    bi.iter()
        .zip(&bu)
        .map(|(&x, &y)| KumaParams::new(a, x, y).map_err(Into::into))
        .collect()
}

/// Rate-matching loss of one corrupted draw, plus the draw's log-likelihood
/// under the schedule as a tape node.
struct Draw<'g> {
    loss: Var<'g>,
    unmask: f64,
    insert: f64,
    logp: Option<Var<'g>>,
}

fn schedule_inputs<'g>(aux: &AuxVars<'g>) -> Vec<Var<'g>> {
    aux.b_ins.iter().chain(aux.b_un.iter()).copied().collect()
}

/// Gradients of a scalar with respect to whichever schedule inputs exist.
fn schedule_grads(aux: &AuxVars<'_>, d_ins: Vec<f64>, d_un: Vec<f64>) -> Vec<Vec<f64>> {
    let mut out = vec![];
    if aux.b_ins.is_some() {
        out.push(d_ins);
    }
    if aux.b_un.is_some() {
        out.push(d_un);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn draw<'g>(
    g: &'g Graph,
    model: &Model,
    prompt: &[TokenId],
    z1: &AugSeq,
    aux: &AuxVars<'g>,
    params: &[KumaParams],
    t: f64,
    rng: &mut impl Rng,
) -> Result<Draw<'g>> {
    let vocab = model.vocab;
    let v = vocab.size as usize;
    let m = z1.len();
    let events = sample_event_times(z1, params, &vocab, rng)?;
    let zt = state_at(t, &events, z1, &vocab)?;
    let p = contract(&zt, &vocab);
    let al = align(&p, z1, &vocab)?;
    let n = p.tokens.len();
    let kappa = hazard_shape(t, model.cfg.a)?;
    let gen = model.forward_gen(g, prompt, &p.tokens, t)?;

    let mut loss = g.scalar(0.0);
    let mut unmask = 0.0;
    if !al.mask_idx.is_empty() {
        let (lam_un, log_k) = (gen.lam_un.expect("n > 0"), gen.log_k.expect("n > 0"));
        let target = match aux.b_un {
            Some(b) => b.gather(&al.mask_pos)?.scale(kappa),
            None => g.constant(Tensor::row(vec![kappa; al.mask_idx.len()])),
        };
        let model_rate = lam_un.gather(&al.mask_idx)?;
        let flat: Vec<usize> = al
            .mask_idx
            .iter()
            .zip(&al.targets)
            .map(|(&i, &y)| i * v + y as usize)
            .collect();
        let log_ky = log_k.gather(&flat)?;
        let term = target.bregman(model_rate)?.sum().sub(target.mul(log_ky)?.sum())?;
        unmask = term.item();
        loss = loss.add(term)?;
    }

    // Gap membership as a (n+1) x m 0/1 matrix, so gap targets are one product.
    let mut member = Tensor::zeros(n + 1, m);
    for (gi, js) in al.gaps.iter().enumerate() {
        for &j in js {
            member.data[gi * m + j] = 1.0;
        }
    }
    let target = match aux.b_ins {
        Some(b) => b.matmul_t(g.constant(member))?.scale(kappa),
        None => g.constant(Tensor::row(al.gaps.iter().map(|js| js.len() as f64 * kappa).collect())),
    };
    let ins = target.bregman(gen.lam_ins)?.sum();
    let insert = ins.item();
    loss = loss.add(ins)?;

    let logp = if aux.b_ins.is_some() || aux.b_un.is_some() {
        let ll = log_likelihood_grad(&zt, z1, t, params, &vocab)?;
        Some(g.custom_scalar(
            &schedule_inputs(aux),
            ll.logp,
            schedule_grads(aux, ll.d_b_ins, ll.d_b_un),
        )?)
    } else {
        None
    };
    Ok(Draw {
        loss,
        unmask,
        insert,
        logp,
    })
}

/// Build the objective for one `(prompt, answer)` pair at time `t`. The
/// returned node's value is the mean of the two draws' losses plus the
/// weighted regularizer; its gradient is the leave-one-out estimator.
pub fn example_objective<'g>(
    g: &'g Graph,
    model: &Model,
    cfg: &ObjectiveConfig,
    prompt: &[TokenId],
    answer: &[TokenId],
    t: f64,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, ObjectiveStats)> {
    example_objective_with_coef(g, model, cfg, prompt, answer, t, rng, None)
}

/// [`example_objective`] with the stop-gradient loss difference replaced by
/// `coef` when given. With the coefficient pinned, the node's value is a
/// smooth function of every parameter, which is what gradient checks need.
#[allow(clippy::too_many_arguments)]
pub fn example_objective_with_coef<'g>(
    g: &'g Graph,
    model: &Model,
    cfg: &ObjectiveConfig,
    prompt: &[TokenId],
    answer: &[TokenId],
    t: f64,
    rng: &mut impl Rng,
    coef: Option<f64>,
) -> Result<(Var<'g>, ObjectiveStats)> {
    let z1 = AugSeq::new(answer.to_vec());
    let aux = model.forward_aux(g, prompt, answer)?;
    let params = schedule_values(model, &aux, answer.len())?;
    let d1 = draw(g, model, prompt, &z1, &aux, &params, t, rng)?;
    let d2 = draw(g, model, prompt, &z1, &aux, &params, t, rng)?;
    let (l1, l2) = (d1.loss.item(), d2.loss.item());
    let mut total = d1.loss.add(d2.loss)?.scale(0.5);
    let mut stats = ObjectiveStats {
        unmask: 0.5 * (d1.unmask + d2.unmask),
        insert: 0.5 * (d1.insert + d2.insert),
        ..Default::default()
    };
    if let (Some(p1), Some(p2)) = (d1.logp, d2.logp) {
        let score = p1.sub(p2)?.scale(0.5 * coef.unwrap_or(l1 - l2));
        stats.score_abs = score.item().abs();
        total = total.add(score)?;
        if cfg.lambda_reg > 0.0 {
            let (grid, w) = uniform_grid(cfg.reg.grid_points);
            let r = schedule_reg_grad(&params, &grid, &w, &cfg.reg)?;
            stats.reg = r.value;
            let reg = g.custom_scalar(
                &schedule_inputs(&aux),
                r.value,
                schedule_grads(&aux, r.d_b_ins, r.d_b_un),
            )?;
            total = total.add(reg.scale(cfg.lambda_reg))?;
        }
    }
    stats.total = 0.5 * (l1 + l2) + cfg.lambda_reg * stats.reg;
    Ok((total, stats))
}
