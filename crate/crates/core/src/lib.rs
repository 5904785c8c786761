//! Variable-length masked discrete flow matching with learnable per-position
//! insertion and unmasking schedules.
//!
//! The float-only pieces live here: Kumaraswamy schedules, the augmented
//! DROP/MASK state space, the conditional path, target rates, reference
//! losses, the tau-leaping sampler and the star-graph task.

pub mod aug;
pub mod cond_path;
pub mod error;
pub mod kuma;
pub mod loss;
pub mod metrics;
pub mod par;
pub mod rates;
pub mod rng;
pub mod sampler;
pub mod star;
pub mod target_rates;

pub use aug::{AugSeq, PartialSeq, TokenId, Vocab};
pub use error::{CoreError, Result};
pub use kuma::KumaParams;
pub use rates::{GeneratorOutput, RateModel};
