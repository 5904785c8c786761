//! Library side of the `lflex` command-line tool.

pub mod commands;
#[cfg(feature = "verify")]
pub mod verify;
