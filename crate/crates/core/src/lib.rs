//! Weighted interacting particle systems and their mean-field limit.
//!
//! - [`micro`]: the microscopic ODE system for positions and weights.
//! - [`kernels`]: interaction functions and skew-symmetric source kernels.
//! - [`macroscheme`]: the splitting scheme for the limiting transport equation with source.
//! - [`measures`]: atomic and grid measures.
//! - [`metrics`]: Wasserstein and bounded Lipschitz distances on the line.

pub mod error;
pub mod kernels;
pub mod macroscheme;
pub mod measures;
pub mod metrics;
pub mod micro;

pub use error::{Error, Result};
pub use kernels::{InteractionKernel, SourceKernel};
pub use measures::{AtomicMeasure, GridMeasure};
pub use micro::ParticleState;

/// Crate version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
