use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{ErrorMetric, ExperimentConfig, FeatureMode};
use crate::error::{Error, Result};
use crate::exact::{exact_moments, oracle_lambda, stream_distribution, ExactMoments};
use crate::greedy::{schedule_lambda, GreedyStep, LambdaGreedyState, LambdaSchedule, OracleContext};
use crate::mdp::{
    aliased_features, build_ringworld, importance_ratio, random_stream, sample_step, FeatureMap, MdpModel, Policy,
    StateFn,
};
use crate::td::GtdState;
use crate::vecops::dot;

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Error after each update.
    pub error_series: Vec<f64>,
    /// λ emitted at each step.
    pub lambda_series: Vec<f64>,
    /// Last λ emitted on arrival in each non-terminal state; `None` if never
    /// reached and always `None` at terminals, where γ = 0 makes λ inert.
    pub final_lambda_per_state: Vec<Option<f64>>,
    /// Step at which the learner produced non-finite values.
    pub diverged: Option<usize>,
    pub final_weights: Vec<f64>,
}

/// Everything derived once from a config and shared by its runs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: MdpModel,
    pub target: Policy,
    pub behavior: Policy,
    /// Features with terminal rows zeroed.
    pub features: FeatureMap,
    pub gamma: StateFn,
    /// Moments of the Monte-Carlo return, used by the oracle schedule.
    pub exact: ExactMoments,
    /// Behaviour stream distribution over states.
    pub d: DVector<f64>,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let n = config.chain_length;
        let (model, _) = build_ringworld(n)?;
        let target = Policy::ring(n, config.target_right)?;
        let behavior = Policy::ring(n, config.behavior_right())?;
        let raw = match &config.features {
            FeatureMode::Tabular => aliased_features(n, &[])?,
            FeatureMode::Aliased { pairs } => aliased_features(n, pairs)?,
        };
        let features = raw.with_terminals_zeroed(&model)?;
        let gamma = StateFn::discount(&model, config.gamma)?;
        let exact = exact_moments(&model, &target, &behavior, &gamma)?;
        let d = stream_distribution(&model, &behavior)?;
        Ok(Self { config: config.clone(), model, target, behavior, features, gamma, exact, d })
    }

    pub fn n_steps(&self) -> usize {
        self.config.steps()
    }

    /// Error of the weights `w` under the configured metric.
    pub fn error(&self, w: &[f64]) -> f64 {
        match self.config.error_metric {
            ErrorMetric::MeanAbs => {
                let (mut total, mut count) = (0.0, 0usize);
                for s in self.model.non_terminal_states() {
                    total += (dot(self.features.x(s), w) - self.exact.v[s]).abs();
                    count += 1;
                }
                total / count as f64
            }
            ErrorMetric::MsveDWeighted => (0..self.model.n_states())
                .map(|s| {
                    let e = dot(self.features.x(s), w) - self.exact.v[s];
                    self.d[s] * e * e
                })
                .sum(),
        }
    }

    fn oracle(&self, w: &[f64], s: usize) -> f64 {
        oracle_lambda(s, w, &self.exact, &self.features)
    }

    /// λ for the very first transition, before any step has been seen.
    fn initial_lambda(&self, greedy: Option<&LambdaGreedyState>, w: &[f64], s: usize) -> f64 {
        if let Some(l) = self.config.initial_lambda {
            return l;
        }
        match self.config.schedule {
            LambdaSchedule::Fixed { value } => value,
            LambdaSchedule::Decay { .. } => 1.0,
            LambdaSchedule::Oracle => self.oracle(w, s),
            LambdaSchedule::Greedy => match (self.config.regime.greedy_regime(), greedy) {
                (crate::greedy::GreedyRegime::OffPolicy, Some(g)) => g.lambda_at(w, self.features.x(s)),
                _ => 1.0,
            },
        }
    }

    /// Runs the learner on the stream seeded with `base_seed + run_index`.
    pub fn run(&self, run_index: usize) -> Result<RunResult> {
        let c = &self.config;
        let nf = self.features.n_features();
        let n_steps = self.n_steps();
        let mut rng = random_stream(c.base_seed.wrapping_add(run_index as u64));
        let mut gtd = GtdState::new(nf, c.alpha, c.alpha * c.eta);
        let mut greedy = match c.schedule {
            LambdaSchedule::Greedy => Some(LambdaGreedyState::new(
                nf,
                c.regime.greedy_regime(),
                c.gamma,
                c.r_max,
                c.greedy_alpha.unwrap_or(c.alpha),
                c.off_policy_init,
            )?),
            _ => None,
        };

        let mut s = self.model.restart_state();
        let mut gamma_t = self.gamma.get(s);
        let mut lambda_t = self.initial_lambda(greedy.as_ref(), &gtd.w, s);
        let mut result = RunResult {
            error_series: Vec::with_capacity(n_steps),
            lambda_series: Vec::with_capacity(n_steps),
            final_lambda_per_state: vec![None; self.model.n_states()],
            diverged: None,
            final_weights: Vec::new(),
        };

        for step in 0..n_steps {
            let tr = sample_step(&self.model, &self.behavior, s, &mut rng)?;
            let rho = importance_ratio(&self.target, &self.behavior, s, tr.a)?;
            let gamma_next = self.gamma.get(tr.s_next);
            let (x_t, x_next) = (self.features.x(s), self.features.x(tr.s_next));

            let greedy_ctx = greedy.as_mut().map(|state| GreedyStep {
                state,
                w_main: &gtd.w,
                x_t,
                x_next,
                reward: tr.reward,
                rho_t: rho,
                gamma_t,
                gamma_next,
            });
            let oracle_ctx = OracleContext { exact: &self.exact, features: &self.features, w_main: &gtd.w };
            let lambda_next = match schedule_lambda(&c.schedule, step + 1, tr.s_next, greedy_ctx, Some(oracle_ctx)) {
                Ok(l) => l,
                Err(Error::Divergence { .. }) => {
                    result.diverged = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            };

            match gtd.gtd_step(x_t, x_next, tr.reward, rho, gamma_t, gamma_next, lambda_t, lambda_next) {
                Ok(_) => {}
                Err(Error::Divergence { .. }) => {
                    result.diverged = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
            let err = self.error(&gtd.w);
            if !err.is_finite() {
                result.diverged = Some(step);
                break;
            }
            result.error_series.push(err);
            result.lambda_series.push(lambda_next);
            if !self.model.is_terminal(tr.s_next) {
                result.final_lambda_per_state[tr.s_next] = Some(lambda_next);
            }

            gamma_t = gamma_next;
            lambda_t = lambda_next;
            s = if tr.terminated {
                if c.reset_trace_on_teleport {
                    gtd.reset_trace();
                }
                self.model.restart_state()
            } else {
                tr.s_next
            };
        }
        result.final_weights = gtd.w;
        Ok(result)
    }

    /// Runs `0..n_runs` on a pool of `jobs` threads; results are in run order.
    pub fn run_all(&self, jobs: usize) -> Result<Vec<RunResult>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..self.config.n_runs).into_par_iter().map(|i| self.run(i)).collect())
    }
}

/// Pointwise statistics over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedResult {
    pub mean_error: Vec<f64>,
    /// Standard error of the mean (sample deviation over `√n`; 0 for one run).
    pub stderr_error: Vec<f64>,
    pub mean_lambda: Vec<f64>,
    /// Mean over runs that reached the state.
    pub final_lambda: Vec<Option<f64>>,
    pub n_runs: usize,
    pub n_diverged: usize,
}

impl AveragedResult {
    /// Mean error over all steps (area under the curve per step).
    pub fn area_under_curve(&self) -> f64 {
        if self.mean_error.is_empty() {
            return f64::INFINITY;
        }
        self.mean_error.iter().sum::<f64>() / self.mean_error.len() as f64
    }

    pub fn final_error(&self) -> f64 {
        self.mean_error.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Mean and standard error of `values`; an infinite entry makes both
/// infinite.
fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().any(|v| !v.is_finite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates runs in index order. Diverged runs count as infinite error
/// from the step they stopped.
pub fn aggregate(runs: &[RunResult], n_steps: usize) -> AveragedResult {
    let n_states = runs.first().map_or(0, |r| r.final_lambda_per_state.len());
    let mut mean_error = Vec::with_capacity(n_steps);
    let mut stderr_error = Vec::with_capacity(n_steps);
    let mut mean_lambda = Vec::with_capacity(n_steps);
    let mut column = Vec::with_capacity(runs.len());
    for t in 0..n_steps {
        column.clear();
        column.extend(runs.iter().map(|r| r.error_series.get(t).copied().unwrap_or(f64::INFINITY)));
        let (m, se) = mean_stderr(&column);
        mean_error.push(m);
        stderr_error.push(se);
        let lambdas: Vec<f64> = runs.iter().filter_map(|r| r.lambda_series.get(t).copied()).collect();
        mean_lambda.push(if lambdas.is_empty() {
            f64::NAN
        } else {
            lambdas.iter().sum::<f64>() / lambdas.len() as f64
        });
    }
    let final_lambda = (0..n_states)
        .map(|s| {
            let seen: Vec<f64> = runs.iter().filter_map(|r| r.final_lambda_per_state[s]).collect();
            (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
        })
        .collect();
    AveragedResult {
        mean_error,
        stderr_error,
        mean_lambda,
        final_lambda,
        n_runs: runs.len(),
        n_diverged: runs.iter().filter(|r| r.diverged.is_some()).count(),
    }
}

/// Builds the experiment, runs every seed and aggregates.
pub fn run_averaged(config: &ExperimentConfig, jobs: usize) -> Result<AveragedResult> {
    let exp = Experiment::new(config)?;
    let runs = exp.run_all(jobs)?;
    Ok(aggregate(&runs, exp.n_steps()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(schedule: LambdaSchedule, alpha: f64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(10, 0.99, schedule, alpha);
        c.n_steps = Some(500);
        c
    }

    #[test]
    fn zero_step_size_keeps_error_constant() {
        let exp = Experiment::new(&config(LambdaSchedule::Fixed { value: 0.5 }, 0.0)).unwrap();
        let r = exp.run(0).unwrap();
        assert_eq!(r.error_series.len(), 500);
        assert!(r.error_series.iter().all(|&e| e == r.error_series[0]));
        assert_eq!(r.error_series[0], exp.error(&[0.0; 10]));
    }

    #[test]
    fn runs_are_deterministic() {
        for schedule in [LambdaSchedule::Greedy, LambdaSchedule::Oracle, LambdaSchedule::Decay { k: 10.0 }] {
            let exp = Experiment::new(&config(schedule, 0.05)).unwrap();
            assert_eq!(exp.run(3).unwrap(), exp.run(3).unwrap());
            assert_ne!(exp.run(3).unwrap().error_series, exp.run(4).unwrap().error_series);
        }
    }

    #[test]
    fn fixed_schedule_reports_constant_lambda() {
        let mut c = config(LambdaSchedule::Fixed { value: 0.3 }, 0.05);
        c.n_runs = 4;
        let avg = run_averaged(&c, 2).unwrap();
        assert!(avg.mean_lambda.iter().all(|&l| (l - 0.3).abs() < 1e-15));
    }

    #[test]
    fn decay_schedule_is_indexed_by_step() {
        let exp = Experiment::new(&config(LambdaSchedule::Decay { k: 10.0 }, 0.05)).unwrap();
        let r = exp.run(0).unwrap();
        assert_eq!(r.lambda_series[0], 10.0 / 11.0);
        assert_eq!(r.lambda_series[9], 0.5);
    }

    #[test]
    fn metrics_vanish_at_exact_values() {
        for metric in [ErrorMetric::MeanAbs, ErrorMetric::MsveDWeighted] {
            let mut c = config(LambdaSchedule::Fixed { value: 1.0 }, 0.05);
            c.error_metric = metric;
            let exp = Experiment::new(&c).unwrap();
            assert!(exp.error(exp.exact.v.as_slice()) < 1e-15);
            assert!(exp.error(&[0.0; 10]) > 0.0);
        }
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let mut c = config(LambdaSchedule::Fixed { value: 1.0 }, 1e6);
        c.regime = super::super::config::Regime::OffPolicy { mu_right: 0.5 };
        c.gamma = 1.0;
        c.n_steps = Some(5000);
        let exp = Experiment::new(&c).unwrap();
        let r = exp.run(0).unwrap();
        let step = r.diverged.expect("should diverge");
        assert_eq!(r.error_series.len(), step);
        let avg = aggregate(&[r], 5000);
        assert_eq!(avg.n_diverged, 1);
        assert!(avg.mean_error[4999].is_infinite());
    }

    #[test]
    fn single_run_average_equals_the_run() {
        let c = config(LambdaSchedule::Oracle, 0.05);
        let exp = Experiment::new(&c).unwrap();
        let r = exp.run(0).unwrap();
        let avg = aggregate(std::slice::from_ref(&r), 500);
        assert_eq!(avg.mean_error, r.error_series);
        assert!(avg.stderr_error.iter().all(|&s| s == 0.0));
        let identical = aggregate(&[r.clone(), r.clone()], 500);
        assert!(identical.stderr_error.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stderr_shrinks_with_more_runs() {
        let mut c = config(LambdaSchedule::Fixed { value: 0.9 }, 0.05);
        c.n_runs = 64;
        let exp = Experiment::new(&c).unwrap();
        let runs = exp.run_all(1).unwrap();
        let small = aggregate(&runs[..16], 500);
        let large = aggregate(&runs, 500);
        let mid = 250;
        let ratio = small.stderr_error[mid] / large.stderr_error[mid];
        // √(64/16) = 2, within sampling noise of the deviation estimate.
        assert!((1.4..2.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut c = config(LambdaSchedule::Greedy, 0.05);
        c.n_runs = 6;
        let exp = Experiment::new(&c).unwrap();
        assert_eq!(exp.run_all(1).unwrap(), exp.run_all(4).unwrap());
    }

    #[test]
    fn learning_makes_progress() {
        let exp = Experiment::new(&config(LambdaSchedule::Fixed { value: 0.9 }, 0.1)).unwrap();
        let r = exp.run(0).unwrap();
        let q = r.error_series.len() / 4;
        let head: f64 = r.error_series[..q].iter().sum();
        let tail: f64 = r.error_series[3 * q..].iter().sum();
        assert!(tail < head);
    }

    #[test]
    fn off_policy_greedy_starts_cautious() {
        let mut c = config(LambdaSchedule::Greedy, 0.05);
        c.regime = super::super::config::Regime::OffPolicy { mu_right: 0.85 };
        c.gamma = 0.95;
        let exp = Experiment::new(&c).unwrap();
        let r = exp.run(0).unwrap();
        assert!(r.lambda_series[0] < 1.0);
        assert!(r.lambda_series.iter().all(|l| (0.0..=1.0).contains(l)));
    }
}
