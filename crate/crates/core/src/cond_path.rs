//! The conditional probability path `p_t(z | z_1)`: each non-pad position is
//! inserted at `T_ins` and unmasked at `T_un > T_ins`; pad positions stay DROP.

use crate::aug::{AugSeq, TokenId, Vocab};
use crate::error::{check_unit, CoreError, Result};
use crate::kuma::{inv_cdf, state_log_prob, trunc_sample, KumaParams, PosState};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Event times of one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Events {
    /// Position is DROP in the clean sequence; no events ever happen.
    Pad,
    Times {
        ins: f64,
        un: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimes(pub Vec<Events>);

fn check_lengths(z1: &AugSeq, params: &[KumaParams]) -> Result<()> {
    if z1.len() != params.len() {
        return Err(CoreError::Shape(format!(
            "sequence length {} but {} schedule parameters",
            z1.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Turn per-position uniform pairs `(u1, u2)` into event times.
pub fn event_times_from_uniforms(
    z1: &AugSeq,
    params: &[KumaParams],
    uniforms: &[(f64, f64)],
    vocab: &Vocab,
) -> Result<EventTimes> {
    check_lengths(z1, params)?;
    if uniforms.len() != z1.len() {
        return Err(CoreError::Shape(format!(
            "{} uniform pairs for length {}",
            uniforms.len(),
            z1.len()
        )));
    }
    let mut out = Vec::with_capacity(z1.len());
    for ((&tok, p), &(u1, u2)) in z1.tokens.iter().zip(params).zip(uniforms) {
        if vocab.is_drop(tok) {
            out.push(Events::Pad);
            continue;
        }
        let ins = inv_cdf(u1, p.a, p.b_ins)?;
        let un = trunc_sample(ins, p.a, p.b_un, u2)?;
        out.push(Events::Times { ins, un });
    }
    Ok(EventTimes(out))
}

pub fn sample_event_times<R: Rng + ?Sized>(
    z1: &AugSeq,
    params: &[KumaParams],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<EventTimes> {
    let uniforms: Vec<(f64, f64)> = (0..z1.len()).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    event_times_from_uniforms(z1, params, &uniforms, vocab)
}

/// State of the augmented sequence at time `t` given its event times.
pub fn state_at(t: f64, events: &EventTimes, z1: &AugSeq, vocab: &Vocab) -> Result<AugSeq> {
    check_unit("t", t)?;
    if events.0.len() != z1.len() {
        return Err(CoreError::Shape("event times and sequence differ in length".into()));
    }
    let tokens = events
        .0
        .iter()
        .zip(&z1.tokens)
        .map(|(e, &tok)| match *e {
            Events::Pad => vocab.drop_id(),
            Events::Times { ins, .. } if t < ins => vocab.drop_id(),
            Events::Times { un, .. } if t < un => vocab.mask,
            Events::Times { .. } => tok,
        })
        .collect();
    Ok(AugSeq { tokens })
}

/// Draw `z_t ~ p_t(. | z_1)` directly.
pub fn corrupt<R: Rng + ?Sized>(
    t: f64,
    z1: &AugSeq,
    params: &[KumaParams],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(AugSeq, EventTimes)> {
    let ev = sample_event_times(z1, params, vocab, rng)?;
    let zt = state_at(t, &ev, z1, vocab)?;
    Ok((zt, ev))
}

/// Per-position state of `zt` relative to `z1`; `None` for pad positions.
pub fn classify(zt: &AugSeq, z1: &AugSeq, vocab: &Vocab) -> Result<Vec<Option<PosState>>> {
    if zt.len() != z1.len() {
        return Err(CoreError::Shape("z_t and z_1 differ in length".into()));
    }
    zt.tokens
        .iter()
        .zip(&z1.tokens)
        .enumerate()
        .map(|(j, (&a, &c))| classify_one(j, a, c, vocab))
        .collect()
}

fn classify_one(j: usize, tok: TokenId, clean: TokenId, vocab: &Vocab) -> Result<Option<PosState>> {
    if vocab.is_drop(clean) {
        return if vocab.is_drop(tok) {
            Ok(None)
        } else {
            Err(CoreError::Unreachable { pos: j + 1, token: tok })
        };
    }
    if vocab.is_drop(tok) {
        Ok(Some(PosState::Drop))
    } else if tok == vocab.mask {
        Ok(Some(PosState::Mask))
    } else if tok == clean {
        Ok(Some(PosState::Clean))
    } else {
        Err(CoreError::Unreachable { pos: j + 1, token: tok })
    }
}

/// `ln p_t(z_t | z_1)` with its gradient with respect to every position's
/// `b_ins` and `b_un` (zero at pad positions).
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikGrad {
    pub logp: f64,
    pub d_b_ins: Vec<f64>,
    pub d_b_un: Vec<f64>,
}

pub fn log_likelihood_grad(
    zt: &AugSeq,
    z1: &AugSeq,
    t: f64,
    params: &[KumaParams],
    vocab: &Vocab,
) -> Result<LogLikGrad> {
    check_lengths(z1, params)?;
    let states = classify(zt, z1, vocab)?;
    let mut out = LogLikGrad {
        logp: 0.0,
        d_b_ins: vec![0.0; z1.len()],
        d_b_un: vec![0.0; z1.len()],
    };
    for (j, (st, p)) in states.iter().zip(params).enumerate() {
        if let Some(st) = st {
            let lp = state_log_prob(*st, t, p)?;
            out.logp += lp.logp;
            out.d_b_ins[j] = lp.d_b_ins;
            out.d_b_un[j] = lp.d_b_un;
        }
    }
    Ok(out)
}

pub fn log_likelihood(zt: &AugSeq, z1: &AugSeq, t: f64, params: &[KumaParams], vocab: &Vocab) -> Result<f64> {
    log_likelihood_grad(zt, z1, t, params, vocab).map(|g| g.logp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const M: TokenId = 8;
    const D: TokenId = 9;

    fn vocab() -> Vocab {
        Vocab::new(9, M).unwrap()
    }

    #[test]
    fn boundaries() {
        let v = vocab();
        let z1 = AugSeq::new(vec![0, 1, 2, D]);
        let params = vec![KumaParams::linear(); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ev = sample_event_times(&z1, &params, &v, &mut rng).unwrap();
            assert_eq!(state_at(1.0, &ev, &z1, &v).unwrap(), z1);
            assert_eq!(state_at(0.0, &ev, &z1, &v).unwrap().tokens, vec![D; 4]);
            assert_eq!(ev.0[3], Events::Pad);
        }
    }

    #[test]
    fn deterministic_from_uniforms() {
        let v = vocab();
        let z1 = AugSeq::new(vec![4, 5]);
        let params = vec![KumaParams::linear(); 2];
        let ev = event_times_from_uniforms(&z1, &params, &[(0.5, 0.5), (0.1, 0.0)], &v).unwrap();
        assert_eq!(ev.0[0], Events::Times { ins: 0.5, un: 0.75 });
        assert_eq!(state_at(0.6, &ev, &z1, &v).unwrap().tokens, vec![M, 5]);
    }

    #[test]
    fn unreachable_state_errors() {
        let v = vocab();
        let z1 = AugSeq::new(vec![0, D]);
        let params = vec![KumaParams::linear(); 2];
        assert!(log_likelihood(&AugSeq::new(vec![1, D]), &z1, 0.5, &params, &v).is_err());
        assert!(log_likelihood(&AugSeq::new(vec![0, M]), &z1, 0.5, &params, &v).is_err());
        let lp = log_likelihood(&AugSeq::new(vec![M, D]), &z1, 0.5, &params, &v).unwrap();
        assert!((lp - (0.5f64 * 2f64.ln()).ln()).abs() < 1e-12);
    }
}
