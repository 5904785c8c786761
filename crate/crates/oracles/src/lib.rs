//! Independent numerical references used to verify the schedule, path,
//! projection and sampler code: ODE integration of forward equations,
//! adaptive quadrature, finite differences, Monte Carlo summaries and exact
//! enumeration over tiny sequence spaces.

pub mod fd;
pub mod kfe;
pub mod mc;
pub mod ode;
pub mod quad;
pub mod teacher;
pub mod tiny;

pub use teacher::Teacher;
pub use tiny::{enumerate_tiny, TinyData, TinySpace};
