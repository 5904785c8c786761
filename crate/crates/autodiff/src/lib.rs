//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor is two-dimensional (vectors are `1 x n`). Binary elementwise
//! ops broadcast a row, a column or a scalar on the right-hand side.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{concat_cols, concat_rows, AdError, Gradients, Graph, Result, Var};
pub use optim::AdamW;
pub use tensor::{GradStore, ParamId, ParamStore, Tensor};
