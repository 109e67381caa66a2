//! Command-line harness: dataset generation, training, source-free
//! adaptation, evaluation, ablation sweeps and reports.
//!
//! Every command reads and writes a run directory (see [`layout::Layout`]);
//! all randomness comes from the config's root seed.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layout;
pub mod plot;
pub mod report;
pub mod run;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
pub use layout::Layout;
