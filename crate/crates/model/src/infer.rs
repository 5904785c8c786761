//! Plain-valued generator outputs for the sampler.

use crate::model_error_to_core;
use crate::net::Model;
use lflex_autodiff::Graph;
use lflex_core::rates::{GeneratorOutput, RateModel};
use lflex_core::{TokenId, Vocab};

impl RateModel for Model {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn rates(&self, prompt: &[TokenId], x: &[TokenId], t: f64) -> lflex_core::Result<GeneratorOutput> {
        let g = Graph::new();
        let out = self.forward_gen(&g, prompt, x, t).map_err(model_error_to_core)?;
        let v = self.vocab.size as usize;
        let k_probs = match out.log_k {
            Some(lk) => lk
                .value()
                .data
                .chunks(v)
                .map(|r| r.iter().map(|x| x.exp()).collect())
                .collect(),
            None => vec![],
        };
        Ok(GeneratorOutput {
            lam_ins: out.lam_ins.value().data,
            lam_un: out.lam_un.map(|u| u.value().data).unwrap_or_default(),
            k_probs,
        })
    }
}
