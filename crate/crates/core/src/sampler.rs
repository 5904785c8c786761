//! Tau-leaping generation starting from the empty sequence.

use crate::aug::TokenId;
use crate::error::{CoreError, Result};
use crate::kuma::clamp_time;
use crate::rates::{GeneratorOutput, RateModel};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub nucleus_p: f64,
    /// Unmask the most confident masks instead of the Poisson-selected ones.
    pub confidence: bool,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            nucleus_p: 1.0,
            confidence: false,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// `(gap index in the previous sequence, number of masks inserted)`.
    pub inserted: Vec<(usize, usize)>,
    /// `(index in the post-insertion sequence, token written)`.
    pub unmasked: Vec<(usize, TokenId)>,
    pub snapshot: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Step at which each final token was inserted.
    pub insert_step: Vec<usize>,
    /// Step at which each final token was unmasked.
    pub unmask_step: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<TokenId>,
    pub trajectory: Trajectory,
}

fn ln_factorial(k: f64) -> f64 {
    if k < 20.0 {
        (2..=k as u64).map(|i| (i as f64).ln()).sum()
    } else {
        let n = k + 1.0;
        let inv = 1.0 / n;
        let inv2 = inv * inv;
        (n - 0.5) * n.ln() - n
            + 0.5 * (2.0 * std::f64::consts::PI).ln()
            + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
    }
}

/// Poisson draw: sequential inversion for small means, transformed rejection
/// with squeeze (PTRS) otherwise.
pub fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(CoreError::Domain {
            what: "poisson mean",
            value: mean,
            expected: "finite and >= 0",
        });
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < 10.0 {
        let u: f64 = rng.gen();
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cum = p;
        while u > cum && k < 10_000 {
            k += 1;
            p *= mean / k as f64;
            cum += p;
            if p == 0.0 {
                break;
            }
        }
        return Ok(k);
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return Ok(k as u64);
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -mean + k * loglam - ln_factorial(k) {
            return Ok(k as u64);
        }
    }
}

/// Sample from the smallest top-probability set whose mass reaches `p`.
/// Ties in probability are broken toward the lower token id.
pub fn nucleus_sample<R: Rng + ?Sized>(probs: &[f64], p: f64, rng: &mut R) -> Result<TokenId> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(CoreError::Domain {
            what: "nucleus p",
            value: p,
            expected: "(0, 1]",
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    if order.is_empty() {
        return Err(CoreError::Shape("token distribution has no mass".into()));
    }
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = 0.0;
    let mut cut = order.len();
    for (r, &i) in order.iter().enumerate() {
        kept += probs[i];
        if kept >= p * total {
            cut = r + 1;
            break;
        }
    }
    let u: f64 = rng.gen::<f64>() * kept;
    let mut acc = 0.0;
    for &i in &order[..cut] {
        acc += probs[i];
        if u < acc {
            return Ok(i as TokenId);
        }
    }
    Ok(order[cut - 1] as TokenId)
}

fn check_output(out: &GeneratorOutput, n: usize, v: usize) -> Result<()> {
    if out.lam_ins.len() != n + 1 || out.lam_un.len() != n || out.k_probs.len() != n {
        return Err(CoreError::Shape(format!(
            "model returned rates for the wrong length (expected {n})"
        )));
    }
    if out.k_probs.iter().any(|r| r.len() != v) {
        return Err(CoreError::Shape("token distribution has the wrong width".into()));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Slot {
    tok: TokenId,
    inserted: usize,
    unmasked: usize,
}

/// Generate one sequence by tau-leaping from the empty sequence.
pub fn sample<M: RateModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    if cfg.steps == 0 {
        return Err(CoreError::Config("sampler needs at least one step".into()));
    }
    let vocab = model.vocab();
    let mask = vocab.mask;
    let v = vocab.size as usize;
    let tau = 1.0 / cfg.steps as f64;
    let mut x: Vec<Slot> = Vec::new();
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let toks = |x: &[Slot]| x.iter().map(|s| s.tok).collect::<Vec<_>>();

    for n in 0..cfg.steps {
        let t_n = n as f64 * tau;
        let cur = toks(&x);
        let out = model.rates(prompt, &cur, clamp_time(t_n))?;
        check_output(&out, cur.len(), v)?;

        // Insertions, placed as contiguous masks inside each gap.
        let mut counts = Vec::with_capacity(cur.len() + 1);
        let mut total = 0usize;
        for &lam in &out.lam_ins {
            let c = poisson_draw(lam * tau, rng)? as usize;
            total += c;
            counts.push(c);
        }
        if cur.len() + total > cfg.max_len {
            return Err(CoreError::LengthOverflow {
                len: cur.len() + total,
                max: cfg.max_len,
            });
        }
        let mut next = Vec::with_capacity(cur.len() + total);
        // new_index[i] = index of old element i after insertion
        let mut new_index = Vec::with_capacity(cur.len());
        let mut inserted = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                inserted.push((g, c));
            }
            for _ in 0..c {
                next.push(Slot {
                    tok: mask,
                    inserted: n,
                    unmasked: usize::MAX,
                });
            }
            if g < x.len() {
                new_index.push(next.len());
                next.push(x[g]);
            }
        }

        // Unmasking applies to masks that existed before this step.
        let mut chosen: Vec<usize> = Vec::new();
        let mut eligible: Vec<usize> = Vec::new();
        for (i, s) in x.iter().enumerate() {
            if s.tok != mask {
                continue;
            }
            eligible.push(i);
            let mut fire = false;
            for y in 0..v {
                let c = poisson_draw(out.lam_un[i] * out.k_probs[i][y] * tau, rng)?;
                fire |= c > 0;
            }
            if fire {
                chosen.push(i);
            }
        }
        if cfg.confidence && !chosen.is_empty() {
            let conf = |i: usize| out.k_probs[i].iter().cloned().fold(0.0, f64::max);
            let mut ranked = eligible.clone();
            ranked.sort_by(|&i, &j| conf(j).total_cmp(&conf(i)).then(i.cmp(&j)));
            ranked.truncate(chosen.len());
            ranked.sort_unstable();
            chosen = ranked;
        }
        let mut unmasked = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let tok = nucleus_sample(&out.k_probs[i], cfg.nucleus_p, rng)?;
            let j = new_index[i];
            next[j].tok = tok;
            next[j].unmasked = n;
            unmasked.push((j, tok));
        }
        x = next;
        records.push(StepRecord {
            step: n,
            time: t_n,
            inserted,
            unmasked,
            snapshot: toks(&x),
        });
    }

    // Fill whatever is still masked at the end.
    let cur = toks(&x);
    if cur.contains(&mask) {
        let out = model.rates(prompt, &cur, clamp_time(1.0))?;
        check_output(&out, cur.len(), v)?;
        let mut unmasked = Vec::new();
        for (i, s) in x.iter_mut().enumerate() {
            if s.tok == mask {
                s.tok = nucleus_sample(&out.k_probs[i], cfg.nucleus_p, rng)?;
                s.unmasked = cfg.steps;
                unmasked.push((i, s.tok));
            }
        }
        records.push(StepRecord {
            step: cfg.steps,
            time: 1.0,
            inserted: vec![],
            unmasked,
            snapshot: toks(&x),
        });
    }

    Ok(SampleOutput {
        tokens: toks(&x),
        trajectory: Trajectory {
            steps: records,
            insert_step: x.iter().map(|s| s.inserted).collect(),
            unmask_step: x.iter().map(|s| s.unmasked).collect(),
        },
    })
}

/// Rebuild every snapshot from the recorded edits alone.
pub fn replay(traj: &Trajectory, mask: TokenId) -> Result<Vec<Vec<TokenId>>> {
    let mut x: Vec<TokenId> = Vec::new();
    let mut out = Vec::with_capacity(traj.steps.len());
    for rec in &traj.steps {
        let mut next = Vec::with_capacity(x.len());
        let mut ins = rec.inserted.iter().peekable();
        for g in 0..=x.len() {
            if let Some(&&(gap, c)) = ins.peek() {
                if gap == g {
                    next.extend(std::iter::repeat_n(mask, c));
                    ins.next();
                }
            }
            if g < x.len() {
                next.push(x[g]);
            }
        }
        if ins.next().is_some() {
            return Err(CoreError::Shape(format!(
                "step {} inserts into a missing gap",
                rec.step
            )));
        }
        for &(j, tok) in &rec.unmasked {
            match next.get_mut(j) {
                Some(slot) if *slot == mask => *slot = tok,
                _ => return Err(CoreError::Shape(format!("step {} unmasks a non-mask at {j}", rec.step))),
            }
        }
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

/// One JSON object per step.
pub fn write_jsonl<W: Write>(traj: &Trajectory, mut w: W) -> std::io::Result<()> {
    for rec in &traj.steps {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
