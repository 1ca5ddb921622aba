//! Declarative ring-world experiments: configs, seeded multi-run execution,
//! parameter sweeps and CSV output.
//!
//! Every output byte is a function of the config and its base seed. Runs
//! may execute on a thread pool but are collected and reduced in run order.

pub mod config;
pub mod output;
pub mod runner;
pub mod sweep;

pub use config::{
    default_alpha_grid, default_eta_grid, ringworld_suite, ErrorMetric, ExperimentConfig, FeatureMode, Regime,
};
pub use output::{write_results, write_sweep, Manifest};
pub use runner::{aggregate, run_averaged, AveragedResult, Experiment, RunResult};
pub use sweep::{sweep, SweepCell, SweepCriterion, SweepResult};
