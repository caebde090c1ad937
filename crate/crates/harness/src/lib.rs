//! Configuration, assumption preflight, experiment execution and CSV output
//! for the coordinated actor-critic learners in `cac-core`.

pub mod config;
pub mod experiment;
pub mod model;
pub mod preflight;
pub mod sweep;

pub use config::ExperimentConfig;
pub use experiment::{run_and_write, run_experiment, ExperimentResult};
pub use preflight::{preflight, PreflightFailed, PreflightReport};
