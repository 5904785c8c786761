//! Networks, training objective, trainer and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
mod infer;
pub mod net;
pub mod objective;
pub mod train;

pub use config::RunConfig;
pub use error::{ModelError, Result};
pub use net::Model;

pub(crate) fn model_error_to_core(e: ModelError) -> lflex_core::CoreError {
    match e {
        ModelError::Core(c) => c,
        other => lflex_core::CoreError::Shape(other.to_string()),
    }
}
