use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::run_averaged;
use crate::error::{Error, Result};

/// Summary of an averaged error curve used to rank sweep cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepCriterion {
    /// Mean error over all steps.
    #[default]
    AreaUnderCurve,
    FinalError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub eta: f64,
    /// `+∞` when any run diverged.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Row-major over `(alpha, eta)`.
    pub cells: Vec<SweepCell>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_cell(&self) -> SweepCell {
        self.cells[self.best]
    }
}

/// Evaluates every `(α, η)` cell of the grid with `template` and picks the
/// lowest finite score; ties keep the first cell in grid order.
pub fn sweep(
    template: &ExperimentConfig,
    alphas: &[f64],
    etas: &[f64],
    criterion: SweepCriterion,
    jobs: usize,
) -> Result<SweepResult> {
    if alphas.is_empty() || etas.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(alphas.len() * etas.len());
    for &alpha in alphas {
        for &eta in etas {
            let config = ExperimentConfig { alpha, eta, ..template.clone() };
            let avg = run_averaged(&config, jobs)?;
            let score = if avg.n_diverged > 0 {
                f64::INFINITY
            } else {
                match criterion {
                    SweepCriterion::AreaUnderCurve => avg.area_under_curve(),
                    SweepCriterion::FinalError => avg.final_error(),
                }
            };
            cells.push(SweepCell { alpha, eta, score });
        }
    }
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.score.is_finite())
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score))
        .map(|(i, _)| i)
        .ok_or(Error::AllDiverged)?;
    Ok(SweepResult { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greedy::LambdaSchedule;
    use crate::harness::config::Regime;

    fn template(value: f64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(10, 0.99, LambdaSchedule::Fixed { value }, 0.1);
        c.n_steps = Some(400);
        c.n_runs = 3;
        c
    }

    #[test]
    fn single_cell_is_best() {
        let r = sweep(&template(0.5), &[0.05], &[1.0], SweepCriterion::AreaUnderCurve, 1).unwrap();
        assert_eq!(r.best, 0);
        assert_eq!(r.cells.len(), 1);
    }

    #[test]
    fn zero_step_size_never_wins_when_learning_helps() {
        let r = sweep(&template(0.5), &[0.0, 0.05, 0.2], &[1.0], SweepCriterion::AreaUnderCurve, 1).unwrap();
        assert_ne!(r.best_cell().alpha, 0.0);
        let r = sweep(&template(0.5), &[0.0, 0.05], &[1.0], SweepCriterion::FinalError, 1).unwrap();
        assert_eq!(r.best_cell().alpha, 0.05);
    }

    #[test]
    fn best_matches_exhaustive_evaluation() {
        let alphas = [0.01, 0.05, 0.2];
        for value in [0.0, 0.5, 1.0] {
            let t = template(value);
            let r = sweep(&t, &alphas, &[1.0], SweepCriterion::AreaUnderCurve, 2).unwrap();
            let scores: Vec<f64> = alphas
                .iter()
                .map(|&alpha| run_averaged(&ExperimentConfig { alpha, ..t.clone() }, 1).unwrap().area_under_curve())
                .collect();
            let argmin = (0..3).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            assert_eq!(r.best, argmin);
            assert_eq!(r.best_cell().score, scores[argmin]);
        }
    }

    #[test]
    fn diverged_cells_are_excluded() {
        let mut t = template(1.0);
        t.regime = Regime::OffPolicy { mu_right: 0.5 };
        t.gamma = 1.0;
        t.n_steps = Some(3000);
        let r = sweep(&t, &[1e6, 0.01], &[1.0], SweepCriterion::AreaUnderCurve, 1).unwrap();
        assert!(r.cells[0].score.is_infinite());
        assert_eq!(r.best, 1);
        assert!(matches!(sweep(&t, &[1e6], &[1.0], SweepCriterion::AreaUnderCurve, 1), Err(Error::AllDiverged)));
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(sweep(&template(0.5), &[], &[1.0], SweepCriterion::AreaUnderCurve, 1).is_err());
    }
}
