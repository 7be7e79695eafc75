//! Experiment harness for the `mfsim` simulator: TOML configuration,
//! experiment drivers, and CSV/SVG/JSON artifacts.

pub mod config;
pub mod experiments;
pub mod output;
pub mod svg;

pub use config::{ExperimentConfig, Preset};
pub use output::Output;
