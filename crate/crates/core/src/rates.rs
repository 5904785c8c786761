//! What a generator predicts for one partial sequence, and the interface the
//! sampler drives.

use crate::aug::{TokenId, Vocab};
use crate::error::Result;
use serde::{Deserialize, Serialize};

/// Predicted rates for a partial sequence of length `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutput {
    /// Insertion rate per gap, length `n + 1`.
    pub lam_ins: Vec<f64>,
    /// Unmask rate per index, length `n`.
    pub lam_un: Vec<f64>,
    /// Token distribution per index, `n` rows of vocabulary size.
    pub k_probs: Vec<Vec<f64>>,
}

/// Anything that can produce rates for a partial sequence at time `t`.
/// `prompt` is clean conditioning context that is never edited.
pub trait RateModel {
    fn vocab(&self) -> Vocab;
    fn rates(&self, prompt: &[TokenId], x: &[TokenId], t: f64) -> Result<GeneratorOutput>;
}

impl<M: RateModel + ?Sized> RateModel for &M {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn rates(&self, prompt: &[TokenId], x: &[TokenId], t: f64) -> Result<GeneratorOutput> {
        (**self).rates(prompt, x, t)
    }
}
