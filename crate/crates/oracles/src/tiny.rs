//! Exhaustive computations on tiny sequence spaces: every clean sequence,
//! every augmented state and every partial (masked, variable-length)
//! sequence, plus forward equations over partial sequences.

use crate::ode::{graded_grid, rk4};
use lflex_core::aug::{contract, AugSeq, TokenId, Vocab};
use lflex_core::kuma::{hazard, state_probs, KumaParams};
use lflex_core::loss::example_loss;
use lflex_core::rates::GeneratorOutput;
use lflex_core::target_rates::target_bundle;
use lflex_core::Result;
use std::collections::HashMap;

/// Sequences of length at most `L` over `V` real tokens, with MASK = `V` and
/// DROP = `V + 1`.
#[derive(Debug, Clone)]
pub struct TinySpace {
    pub len: usize,
    pub v: u32,
    pub vocab: Vocab,
    /// Clean variable-length sequences over the real tokens.
    pub clean: Vec<Vec<TokenId>>,
    /// Fixed-length augmented states over real tokens, MASK and DROP.
    pub aug: Vec<AugSeq>,
    /// Variable-length sequences over real tokens and MASK.
    pub partial: Vec<Vec<TokenId>>,
    partial_index: HashMap<Vec<TokenId>, usize>,
}

fn words(alphabet: &[TokenId], len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|w| {
                alphabet.iter().map(move |&a| {
                    let mut w2 = w.clone();
                    w2.push(a);
                    w2
                })
            })
            .collect();
    }
    out
}

pub fn enumerate_tiny(len: usize, v: u32) -> TinySpace {
    let vocab = Vocab { size: v + 1, mask: v };
    let real: Vec<TokenId> = (0..v).collect();
    let with_mask: Vec<TokenId> = (0..=v).collect();
    let with_drop: Vec<TokenId> = (0..=v + 1).collect();
    let clean = (0..=len).flat_map(|n| words(&real, n)).collect();
    let aug = words(&with_drop, len).into_iter().map(AugSeq::new).collect();
    let partial: Vec<Vec<TokenId>> = (0..=len).flat_map(|n| words(&with_mask, n)).collect();
    let partial_index = partial.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    TinySpace {
        len,
        v,
        vocab,
        clean,
        aug,
        partial,
        partial_index,
    }
}

/// A data distribution: clean augmented sequences with weights and their
/// per-position schedules.
#[derive(Debug, Clone)]
pub struct TinyData {
    pub items: Vec<(AugSeq, f64, Vec<KumaParams>)>,
}

impl TinySpace {
    pub fn index(&self, x: &[TokenId]) -> Option<usize> {
        self.partial_index.get(x).copied()
    }

    /// `p_t(z | z1)` for an augmented state, by independence across positions.
    pub fn cond_prob(&self, z: &AugSeq, z1: &AugSeq, params: &[KumaParams], t: f64) -> Result<f64> {
        let drop = self.vocab.drop_id();
        let mut p = 1.0;
        for j in 0..self.len {
            let (a, c) = (z.tokens[j], z1.tokens[j]);
            if c == drop {
                if a != drop {
                    return Ok(0.0);
                }
                continue;
            }
            let s = state_probs(t, &params[j])?;
            p *= if a == drop {
                s.drop
            } else if a == self.vocab.mask {
                s.mask
            } else if a == c {
                s.unmasked
            } else {
                0.0
            };
        }
        Ok(p)
    }

    /// Marginal `p_t(x)` over partial sequences.
    pub fn marginal(&self, data: &TinyData, t: f64) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.partial.len()];
        for (z1, w, params) in &data.items {
            for z in &self.aug {
                let pz = self.cond_prob(z, z1, params, t)?;
                if pz > 0.0 {
                    let x = contract(z, &self.vocab).tokens;
                    p[self.index(&x).unwrap()] += w * pz;
                }
            }
        }
        Ok(p)
    }

    /// Rates of the conditional generator pushed onto partial sequences,
    /// kept per gap and per index; `None` where `p_t(x) = 0`.
    pub fn projected_outputs(&self, data: &TinyData, t: f64) -> Result<Vec<Option<GeneratorOutput>>> {
        let drop = self.vocab.drop_id();
        let vs = self.vocab.size as usize;
        let mut p = vec![0.0; self.partial.len()];
        let mut outs: Vec<GeneratorOutput> = self
            .partial
            .iter()
            .map(|x| GeneratorOutput {
                lam_ins: vec![0.0; x.len() + 1],
                lam_un: vec![0.0; x.len()],
                k_probs: vec![vec![0.0; vs]; x.len()],
            })
            .collect();
        for (z1, w, params) in &data.items {
            for z in &self.aug {
                let pz = w * self.cond_prob(z, z1, params, t)?;
                if pz == 0.0 {
                    continue;
                }
                let from = self.index(&contract(z, &self.vocab).tokens).unwrap();
                p[from] += pz;
                let out = &mut outs[from];
                let mut seen = 0;
                for j in 0..self.len {
                    let tok = z.tokens[j];
                    if z1.tokens[j] != drop {
                        if tok == drop {
                            out.lam_ins[seen] += pz * hazard(t, params[j].a, params[j].b_ins)?;
                        } else if tok == self.vocab.mask {
                            let r = pz * hazard(t, params[j].a, params[j].b_un)?;
                            out.lam_un[seen] += r;
                            out.k_probs[seen][z1.tokens[j] as usize] += r;
                        }
                    }
                    if tok != drop {
                        seen += 1;
                    }
                }
            }
        }
        Ok(outs
            .into_iter()
            .zip(&p)
            .map(|(mut o, &px)| {
                (px > 0.0).then(|| {
                    o.lam_ins.iter_mut().for_each(|r| *r /= px);
                    for (l, k) in o.lam_un.iter_mut().zip(o.k_probs.iter_mut()) {
                        if *l > 0.0 {
                            k.iter_mut().for_each(|v| *v /= *l);
                        }
                        *l /= px;
                    }
                    o
                })
            })
            .collect())
    }

    /// Transitions out of partial sequence `x` under a generator output:
    /// `(target index, rate)`.
    pub fn transitions(&self, x: &[TokenId], out: &GeneratorOutput) -> Vec<(usize, f64)> {
        let mut tr = Vec::new();
        if x.len() < self.len {
            for (g, &r) in out.lam_ins.iter().enumerate() {
                if r > 0.0 {
                    let mut y = x.to_vec();
                    y.insert(g, self.vocab.mask);
                    tr.push((self.index(&y).unwrap(), r));
                }
            }
        }
        for (i, &tok) in x.iter().enumerate() {
            if tok != self.vocab.mask {
                continue;
            }
            for y_tok in 0..self.v {
                let r = out.lam_un[i] * out.k_probs[i][y_tok as usize];
                if r > 0.0 {
                    let mut y = x.to_vec();
                    y[i] = y_tok;
                    tr.push((self.index(&y).unwrap(), r));
                }
            }
        }
        tr
    }

    /// Forward-equation right-hand side for generator outputs per state.
    pub fn kfe_rhs(&self, outs: &[GeneratorOutput], p: &[f64]) -> Vec<f64> {
        let mut dp = vec![0.0; p.len()];
        for (i, x) in self.partial.iter().enumerate() {
            if p[i] == 0.0 {
                continue;
            }
            for (j, r) in self.transitions(x, &outs[i]) {
                dp[i] -= p[i] * r;
                dp[j] += p[i] * r;
            }
        }
        dp
    }

    /// Integrate the forward equations with the projected rates from the
    /// closed-form marginal at `t0` and return the integrated marginals at
    /// `times` (each in `(t0, 1)`).
    pub fn integrate_projected(
        &self,
        data: &TinyData,
        t0: f64,
        times: &[f64],
        per_side: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let t_end = times.iter().cloned().fold(0.5, f64::max);
        let grid: Vec<f64> = graded_grid(t0, t_end, per_side, times)
            .into_iter()
            .filter(|&t| t <= t_end)
            .collect();
        let p0 = self.marginal(data, t0)?;
        let null = self.null_output();
        let rhs = |t: f64, p: &[f64]| {
            let outs: Vec<GeneratorOutput> = self
                .projected_outputs(data, t)
                .expect("valid data")
                .into_iter()
                .enumerate()
                .map(|(i, o)| o.unwrap_or_else(|| null(i)))
                .collect();
            self.kfe_rhs(&outs, p)
        };
        let ys = rk4(rhs, &p0, &grid);
        Ok(times
            .iter()
            .map(|t| ys[grid.iter().position(|g| g == t).unwrap()].clone())
            .collect())
    }

    fn null_output(&self) -> impl Fn(usize) -> GeneratorOutput + '_ {
        move |i| {
            let n = self.partial[i].len();
            GeneratorOutput {
                lam_ins: vec![0.0; n + 1],
                lam_un: vec![0.0; n],
                k_probs: vec![vec![0.0; self.vocab.size as usize]; n],
            }
        }
    }

    /// Expected conditional rate-matching loss at time `t` for a generator
    /// given as one output per partial sequence.
    pub fn expected_loss(&self, data: &TinyData, outs: &[GeneratorOutput], t: f64) -> Result<f64> {
        let mut tot = 0.0;
        for (z1, w, params) in &data.items {
            for z in &self.aug {
                let pz = self.cond_prob(z, z1, params, t)?;
                if pz == 0.0 {
                    continue;
                }
                let x = contract(z, &self.vocab);
                let bundle = target_bundle(&x, z1, t, params, &self.vocab)?;
                let l = example_loss(&bundle, &outs[self.index(&x.tokens).unwrap()])?;
                tot += w * pz * l.total();
            }
        }
        Ok(tot)
    }
}

/// Terminal KL and integrated loss for one generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlBound {
    pub kl: f64,
    pub integrated_loss: f64,
}

/// Run data and generator forward from the data marginal at `t0` to `t1`;
/// return `KL(p_data(t1) || p_gen(t1))` and the time-integrated expected loss.
pub fn terminal_kl_bound<G>(
    space: &TinySpace,
    data: &TinyData,
    gen: G,
    t0: f64,
    t1: f64,
    per_side: usize,
) -> Result<KlBound>
where
    G: Fn(f64) -> Vec<GeneratorOutput>,
{
    let grid = graded_grid(t0, t1, per_side, &[]);
    let n = space.partial.len();
    let p0 = space.marginal(data, t0)?;
    // state: generator marginal followed by the loss accumulator
    let mut y0 = p0.clone();
    y0.push(0.0);
    let rhs = |t: f64, y: &[f64]| {
        let outs = gen(t);
        assert_eq!(outs.len(), n, "generator must cover every partial state");
        let mut d = space.kfe_rhs(&outs, &y[..n]);
        d.push(space.expected_loss(data, &outs, t).expect("valid data"));
        d
    };
    let ys = rk4(rhs, &y0, &grid);
    let last = ys.last().unwrap();
    let pd = space.marginal(data, t1)?;
    let mut kl = 0.0;
    for (a, b) in pd.iter().zip(&last[..n]) {
        if *a > 0.0 {
            kl += a * (a / b).ln();
        }
    }
    Ok(KlBound {
        kl,
        integrated_loss: last[n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_space_sizes() {
        let s = enumerate_tiny(2, 2);
        assert_eq!(s.clean.len(), 7);
        assert_eq!(s.aug.len(), 16);
        assert_eq!(s.partial.len(), 13);
    }

    #[test]
    fn marginal_sums_to_one() {
        let s = enumerate_tiny(2, 2);
        let d = s.vocab.drop_id();
        let data = TinyData {
            items: vec![
                (
                    AugSeq::new(vec![0, 1]),
                    0.6,
                    vec![KumaParams::new(1.5, 2.0, 0.7).unwrap(); 2],
                ),
                (AugSeq::new(vec![1, d]), 0.4, vec![KumaParams::linear(); 2]),
            ],
        };
        for t in [0.1, 0.5, 0.9] {
            let p = s.marginal(&data, t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
