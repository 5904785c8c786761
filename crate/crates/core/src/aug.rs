//! Augmented sequences over `V ∪ {DROP}` and their contraction to
//! variable-length partial sequences.
//!
//! Positions handed to or returned from this module are 1-based, matching the
//! convention that gap `i` lies between `s^i` and `s^{i+1}` with `s^0 = 0` and
//! `s^{n+1} = L + 1`.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Vocabulary layout. Ids `0..size` are real tokens (MASK among them); the
/// DROP sentinel is `size`, outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
    pub mask: TokenId,
}

impl Vocab {
    pub fn new(size: u32, mask: TokenId) -> Result<Self> {
        if mask >= size {
            return Err(CoreError::Shape(format!("mask id {mask} not below vocab size {size}")));
        }
        Ok(Self { size, mask })
    }

    pub fn drop_id(&self) -> TokenId {
        self.size
    }

    pub fn is_drop(&self, t: TokenId) -> bool {
        t == self.size
    }
}

/// Fixed-length sequence over `V ∪ {DROP}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugSeq {
    pub tokens: Vec<TokenId>,
}

/// Variable-length view of an augmented sequence: the surviving tokens and the
/// 1-based augmented positions they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSeq {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    /// Length `L` of the augmented sequence this was contracted from.
    pub aug_len: usize,
}

impl AugSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Pad `clean` with trailing DROPs up to length `max_len`.
    pub fn padded(clean: &[TokenId], max_len: usize, vocab: &Vocab) -> Result<Self> {
        if clean.len() > max_len {
            return Err(CoreError::LengthOverflow {
                len: clean.len(),
                max: max_len,
            });
        }
        let mut tokens = clean.to_vec();
        tokens.resize(max_len, vocab.drop_id());
        Ok(Self { tokens })
    }
}

/// Delete DROPs, remembering where each survivor sat.
pub fn contract(z: &AugSeq, vocab: &Vocab) -> PartialSeq {
    let mut tokens = Vec::with_capacity(z.len());
    let mut positions = Vec::with_capacity(z.len());
    for (j, &tok) in z.tokens.iter().enumerate() {
        if !vocab.is_drop(tok) {
            tokens.push(tok);
            positions.push(j + 1);
        }
    }
    PartialSeq {
        tokens,
        positions,
        aug_len: z.len(),
    }
}

/// Inverse of [`contract`]: scatter tokens to their positions, DROP elsewhere.
pub fn expand(p: &PartialSeq, vocab: &Vocab) -> Result<AugSeq> {
    if p.tokens.len() != p.positions.len() {
        return Err(CoreError::Shape(format!(
            "{} tokens but {} positions",
            p.tokens.len(),
            p.positions.len()
        )));
    }
    let mut out = vec![vocab.drop_id(); p.aug_len];
    let mut prev = 0usize;
    for (i, (&tok, &pos)) in p.tokens.iter().zip(&p.positions).enumerate() {
        if pos == 0 || pos > p.aug_len {
            return Err(CoreError::PositionOutOfRange { pos, max: p.aug_len });
        }
        if pos <= prev {
            return Err(CoreError::PositionsNotIncreasing { index: i });
        }
        prev = pos;
        out[pos - 1] = tok;
    }
    Ok(AugSeq { tokens: out })
}

/// Drop the DROPs and keep the rest.
pub fn rmdrop(z: &AugSeq, vocab: &Vocab) -> Vec<TokenId> {
    z.tokens.iter().copied().filter(|&t| !vocab.is_drop(t)).collect()
}

/// 1-based augmented positions strictly between `s^i` and `s^{i+1}`.
pub fn gap_positions(positions: &[usize], aug_len: usize, i: usize) -> Result<std::ops::Range<usize>> {
    let n = positions.len();
    if i > n {
        return Err(CoreError::GapIndex { index: i, max: n });
    }
    let lo = if i == 0 { 0 } else { positions[i - 1] };
    let hi = if i == n { aug_len + 1 } else { positions[i] };
    Ok(lo + 1..hi.max(lo + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    // a..h = 0..7, MASK = 8, vocab size 9, DROP = 9
    const M: TokenId = 8;
    const D: TokenId = 9;

    fn vocab() -> Vocab {
        Vocab::new(9, M).unwrap()
    }

    #[test]
    fn contract_reference() {
        let z = AugSeq::new(vec![M, D, 2, M, D, 5, M, M]);
        let p = contract(&z, &vocab());
        assert_eq!(p.tokens, vec![M, 2, M, 5, M, M]);
        assert_eq!(p.positions, vec![1, 3, 4, 6, 7, 8]);
        assert_eq!(expand(&p, &vocab()).unwrap(), z);
    }

    #[test]
    fn contract_edge_cases() {
        let p = contract(&AugSeq::new(vec![D; 4]), &vocab());
        assert!(p.tokens.is_empty());
        let z = AugSeq::new(vec![0, 1, 2]);
        let p = contract(&z, &vocab());
        assert_eq!(p.positions, vec![1, 2, 3]);
    }

    #[test]
    fn rmdrop_reference() {
        assert_eq!(rmdrop(&AugSeq::new(vec![0, D, 2, D]), &vocab()), vec![0, 2]);
    }

    #[test]
    fn gap_reference() {
        let s = [1, 3, 4, 6, 7, 8];
        assert_eq!(gap_positions(&s, 8, 1).unwrap().collect::<Vec<_>>(), vec![2]);
        assert_eq!(gap_positions(&s, 8, 2).unwrap().count(), 0);
        assert_eq!(gap_positions(&[2, 3], 5, 2).unwrap().collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(gap_positions(&[], 3, 0).unwrap().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(gap_positions(&s, 8, 7).is_err());
    }

    #[test]
    fn expand_rejects_bad_positions() {
        let p = PartialSeq {
            tokens: vec![0, 1],
            positions: vec![3, 2],
            aug_len: 4,
        };
        assert!(matches!(
            expand(&p, &vocab()),
            Err(CoreError::PositionsNotIncreasing { .. })
        ));
        let p = PartialSeq {
            tokens: vec![0],
            positions: vec![5],
            aug_len: 4,
        };
        assert!(expand(&p, &vocab()).is_err());
    }
}
