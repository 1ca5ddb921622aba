use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::AveragedResult;
use super::sweep::SweepResult;
use crate::error::Result;

pub const ERRORS_FILE: &str = "errors.csv";
pub const FINAL_LAMBDA_FILE: &str = "final_lambda.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Provenance of a results directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub n_diverged: usize,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, n_diverged: usize) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.resolved(),
            seeds: config.seeds(),
            n_diverged,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `errors.csv`, `final_lambda.csv` and `manifest.json` into `dir`.
/// Steps are numbered from 1 (the error after the first update). Floats use
/// the shortest round-trip form, so output is byte-stable.
pub fn write_results(dir: &Path, config: &ExperimentConfig, result: &AveragedResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let steps = result.mean_error.len();
    write_csv(
        &dir.join(ERRORS_FILE),
        &["step", "mean_error", "stderr_error", "mean_lambda"],
        (0..steps).map(|t| {
            vec![
                (t + 1).to_string(),
                result.mean_error[t].to_string(),
                result.stderr_error[t].to_string(),
                result.mean_lambda[t].to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join(FINAL_LAMBDA_FILE),
        &["state", "final_lambda"],
        result
            .final_lambda
            .iter()
            .enumerate()
            .map(|(s, l)| vec![s.to_string(), l.map(|v| v.to_string()).unwrap_or_default()]),
    )?;
    let manifest = Manifest::new(config, result.n_diverged);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Writes the sweep grid as `alpha,eta,score,best`.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join(SWEEP_FILE),
        &["alpha", "eta", "score", "best"],
        result.cells.iter().enumerate().map(|(i, c)| {
            vec![c.alpha.to_string(), c.eta.to_string(), c.score.to_string(), (i == result.best).to_string()]
        }),
    )
}
