//! Exact projected rates for a single known clean sequence, obtained by
//! summing over every way the current partial sequence can sit inside it.
//! Cost grows like `C(L, n)`, so this is only for short sequences.

use lflex_core::aug::{AugSeq, TokenId, Vocab};
use lflex_core::kuma::{hazard, state_probs, KumaParams};
use lflex_core::rates::{GeneratorOutput, RateModel};
use lflex_core::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct Teacher {
    pub z1: AugSeq,
    pub params: Vec<KumaParams>,
    pub vocab: Vocab,
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

impl Teacher {
    pub fn new(z1: AugSeq, params: Vec<KumaParams>, vocab: Vocab) -> Result<Self> {
        if z1.len() != params.len() {
            return Err(CoreError::Shape("one schedule per position expected".into()));
        }
        Ok(Self { z1, params, vocab })
    }
}

impl RateModel for Teacher {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn rates(&self, _prompt: &[TokenId], x: &[TokenId], t: f64) -> Result<GeneratorOutput> {
        let l = self.z1.len();
        let n = x.len();
        let drop = self.vocab.drop_id();
        let vs = self.vocab.size as usize;
        let probs = self
            .params
            .iter()
            .map(|p| state_probs(t, p))
            .collect::<Result<Vec<_>>>()?;
        let lam_ins: Vec<f64> = self
            .params
            .iter()
            .map(|p| hazard(t, p.a, p.b_ins))
            .collect::<Result<_>>()?;
        let lam_un: Vec<f64> = self
            .params
            .iter()
            .map(|p| hazard(t, p.a, p.b_un))
            .collect::<Result<_>>()?;
        let mut out = GeneratorOutput {
            lam_ins: vec![0.0; n + 1],
            lam_un: vec![0.0; n],
            k_probs: vec![vec![0.0; vs]; n],
        };
        let mut total = 0.0;
        if n <= l {
            for_each_subset(l, n, &mut |s: &[usize]| {
                let mut w = 1.0;
                let mut k = 0;
                for j in 0..l {
                    let clean = self.z1.tokens[j];
                    if k < n && s[k] == j {
                        w *= if clean == drop {
                            0.0
                        } else if x[k] == self.vocab.mask {
                            probs[j].mask
                        } else if x[k] == clean {
                            probs[j].unmasked
                        } else {
                            0.0
                        };
                        k += 1;
                    } else if clean != drop {
                        w *= probs[j].drop;
                    }
                    if w == 0.0 {
                        return;
                    }
                }
                total += w;
                let mut gap = 0;
                let mut k = 0;
                for j in 0..l {
                    if k < n && s[k] == j {
                        if x[k] == self.vocab.mask {
                            out.lam_un[k] += w * lam_un[j];
                            out.k_probs[k][self.z1.tokens[j] as usize] += w * lam_un[j];
                        }
                        k += 1;
                        gap = k;
                    } else if self.z1.tokens[j] != drop {
                        out.lam_ins[gap] += w * lam_ins[j];
                    }
                }
            });
        }
        if total == 0.0 {
            return Err(CoreError::Inconsistent { index: 0 });
        }
        out.lam_ins.iter_mut().for_each(|r| *r /= total);
        for (l, k) in out.lam_un.iter_mut().zip(out.k_probs.iter_mut()) {
            if *l > 0.0 {
                k.iter_mut().for_each(|v| *v /= *l);
            } else {
                // never used for unmasking; any valid distribution will do
                k[0] = 1.0;
            }
            *l /= total;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiny::{enumerate_tiny, TinyData};

    #[test]
    fn agrees_with_full_enumeration() {
        let s = enumerate_tiny(3, 2);
        let d = s.vocab.drop_id();
        let z1 = AugSeq::new(vec![1, 0, d]);
        let params = vec![
            KumaParams::new(1.3, 2.0, 0.5).unwrap(),
            KumaParams::new(1.3, 0.7, 3.0).unwrap(),
            KumaParams::linear(),
        ];
        let teacher = Teacher::new(z1.clone(), params.clone(), s.vocab).unwrap();
        let data = TinyData {
            items: vec![(z1, 1.0, params)],
        };
        for t in [0.2, 0.6] {
            let outs = s.projected_outputs(&data, t).unwrap();
            for (i, o) in outs.iter().enumerate() {
                if let Some(o) = o {
                    let tr = teacher.rates(&[], &s.partial[i], t).unwrap();
                    for (a, b) in o.lam_ins.iter().zip(&tr.lam_ins) {
                        assert!((a - b).abs() < 1e-10);
                    }
                    for (a, b) in o.lam_un.iter().zip(&tr.lam_un) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
