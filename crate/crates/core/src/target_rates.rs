//! Rates of the conditional generator projected onto variable-length
//! sequences: unmask rates at MASK slots and per-gap insertion rates.

use crate::aug::{gap_positions, AugSeq, PartialSeq, TokenId, Vocab};
use crate::error::{CoreError, Result};
use crate::kuma::{hazard, KumaParams};
use serde::{Deserialize, Serialize};

/// How a partial sequence sits inside its clean augmented sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// Indices `i` into the partial sequence holding MASK.
    pub mask_idx: Vec<usize>,
    /// Zero-based augmented position of each MASK in `mask_idx`.
    pub mask_pos: Vec<usize>,
    /// Clean token each MASK in `mask_idx` will become.
    pub targets: Vec<TokenId>,
    /// For every gap `0..=n`, the zero-based augmented positions inside it
    /// that are not DROP in the clean sequence.
    pub gaps: Vec<Vec<usize>>,
}

pub fn align(p: &PartialSeq, z1: &AugSeq, vocab: &Vocab) -> Result<Alignment> {
    if p.aug_len != z1.len() || p.tokens.len() != p.positions.len() {
        return Err(CoreError::Shape(
            "partial sequence does not match clean sequence".into(),
        ));
    }
    let mut al = Alignment {
        mask_idx: vec![],
        mask_pos: vec![],
        targets: vec![],
        gaps: Vec::with_capacity(p.tokens.len() + 1),
    };
    let mut prev = 0;
    for (i, (&tok, &pos)) in p.tokens.iter().zip(&p.positions).enumerate() {
        if pos == 0 || pos > z1.len() {
            return Err(CoreError::PositionOutOfRange { pos, max: z1.len() });
        }
        if pos <= prev {
            return Err(CoreError::PositionsNotIncreasing { index: i });
        }
        prev = pos;
        let clean = z1.tokens[pos - 1];
        if vocab.is_drop(clean) {
            return Err(CoreError::Unreachable { pos, token: tok });
        }
        if tok == vocab.mask {
            al.mask_idx.push(i);
            al.mask_pos.push(pos - 1);
            al.targets.push(clean);
        } else if tok != clean {
            return Err(CoreError::Inconsistent { index: i });
        }
    }
    for g in 0..=p.tokens.len() {
        let members = gap_positions(&p.positions, p.aug_len, g)?
            .map(|j| j - 1)
            .filter(|&j| !vocab.is_drop(z1.tokens[j]))
            .collect();
        al.gaps.push(members);
    }
    Ok(al)
}

/// Target rates for one partial sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRateBundle {
    /// Unmask rate per index of the partial sequence; zero where not MASK.
    pub unmask: Vec<f64>,
    /// Total insertion rate per gap `0..=n`.
    pub insert: Vec<f64>,
    /// Clean target token per MASK index, `None` elsewhere.
    pub targets: Vec<Option<TokenId>>,
}

pub fn target_bundle(
    p: &PartialSeq,
    z1: &AugSeq,
    t: f64,
    params: &[KumaParams],
    vocab: &Vocab,
) -> Result<TargetRateBundle> {
    if params.len() != z1.len() {
        return Err(CoreError::Shape("one schedule per augmented position expected".into()));
    }
    let al = align(p, z1, vocab)?;
    let n = p.tokens.len();
    let mut unmask = vec![0.0; n];
    let mut targets = vec![None; n];
    for ((&i, &j), &y) in al.mask_idx.iter().zip(&al.mask_pos).zip(&al.targets) {
        unmask[i] = hazard(t, params[j].a, params[j].b_un)?;
        targets[i] = Some(y);
    }
    let insert = al
        .gaps
        .iter()
        .map(|g| g.iter().map(|&j| hazard(t, params[j].a, params[j].b_ins)).sum())
        .collect::<Result<Vec<f64>>>()?;
    Ok(TargetRateBundle {
        unmask,
        insert,
        targets,
    })
}

/// Schedule of the fixed-order baseline: linear in every position.
pub fn flexmdm_params(len: usize) -> Vec<KumaParams> {
    vec![KumaParams::linear(); len]
}
