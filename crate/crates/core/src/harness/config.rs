use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greedy::{GreedyRegime, LambdaSchedule, OffPolicyInit};

/// How the behaviour policy relates to the target policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    #[default]
    OnPolicy,
    /// Behaviour policy moves right with probability `mu_right`.
    OffPolicy { mu_right: f64 },
}

impl Regime {
    pub fn greedy_regime(&self) -> GreedyRegime {
        match self {
            Regime::OnPolicy => GreedyRegime::OnPolicy,
            Regime::OffPolicy { .. } => GreedyRegime::OffPolicy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureMode {
    #[default]
    Tabular,
    /// One-hot features where each listed pair of states shares a feature.
    Aliased { pairs: Vec<(usize, usize)> },
}

/// Per-step error of the main learner against the exact values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// Mean of `|x(s)·w − v(s)|` over non-terminal states.
    #[default]
    MeanAbs,
    /// `Σ_s d(s) (x(s)·w − v(s))²` under the behaviour stream distribution.
    MsveDWeighted,
}

/// A single ring-world experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub chain_length: usize,
    #[serde(default)]
    pub regime: Regime,
    /// Target policy's probability of moving right.
    #[serde(default = "default_target_right")]
    pub target_right: f64,
    pub gamma: f64,
    pub schedule: LambdaSchedule,
    pub alpha: f64,
    /// Auxiliary step-size ratio: `α_h = α·η`.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Step size of the λ-greedy learners; defaults to `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy_alpha: Option<f64>,
    #[serde(default)]
    pub features: FeatureMode,
    /// Defaults to `100 × chain_length`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub error_metric: ErrorMetric,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default)]
    pub off_policy_init: OffPolicyInit,
    /// λ used on the first transition; by default 1 for fixed-start
    /// schedules and on-policy λ-greedy, and computed from the initial
    /// weights otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_lambda: Option<f64>,
    /// Clear the main learner's trace on every restart. The discount of the
    /// terminal state already cuts it, so this is off by default.
    #[serde(default)]
    pub reset_trace_on_teleport: bool,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_target_right() -> f64 {
    0.95
}
fn default_eta() -> f64 {
    1.0
}
fn default_runs() -> usize {
    1
}
fn default_r_max() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// A tabular on-policy config with defaults for every optional field.
    pub fn new(chain_length: usize, gamma: f64, schedule: LambdaSchedule, alpha: f64) -> Self {
        Self {
            name: default_name(),
            chain_length,
            regime: Regime::OnPolicy,
            target_right: default_target_right(),
            gamma,
            schedule,
            alpha,
            eta: default_eta(),
            greedy_alpha: None,
            features: FeatureMode::Tabular,
            n_steps: None,
            n_runs: default_runs(),
            base_seed: 0,
            error_metric: ErrorMetric::MeanAbs,
            r_max: default_r_max(),
            off_policy_init: OffPolicyInit::Squared,
            initial_lambda: None,
            reset_trace_on_teleport: false,
        }
    }

    pub fn steps(&self) -> usize {
        self.n_steps.unwrap_or(100 * self.chain_length)
    }

    pub fn behavior_right(&self) -> f64 {
        match self.regime {
            Regime::OnPolicy => self.target_right,
            Regime::OffPolicy { mu_right } => mu_right,
        }
    }

    /// Seeds of every run, in run order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64).map(|i| self.base_seed.wrapping_add(i)).collect()
    }

    /// Copy with `n_steps` filled in.
    pub fn resolved(&self) -> Self {
        Self { n_steps: Some(self.steps()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{}: {msg}", self.name)));
        if self.chain_length < 4 {
            return bad(format!("chain_length must be at least 4, got {}", self.chain_length));
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        for (field, v) in [("alpha", Some(self.alpha)), ("greedy_alpha", self.greedy_alpha)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{field} must be finite and non-negative, got {v}"));
                }
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.r_max >= 0.0 && self.r_max.is_finite()) {
            return bad(format!("r_max must be non-negative, got {}", self.r_max));
        }
        if !(0.0..=1.0).contains(&self.target_right) {
            return bad(format!("target_right must lie in [0, 1], got {}", self.target_right));
        }
        if let Regime::OffPolicy { mu_right } = self.regime {
            if !(0.0..=1.0).contains(&mu_right) {
                return bad(format!("mu_right must lie in [0, 1], got {mu_right}"));
            }
            let covers = |pi: f64, mu: f64| pi == 0.0 || mu > 0.0;
            if !covers(self.target_right, mu_right) || !covers(1.0 - self.target_right, 1.0 - mu_right) {
                return bad("behaviour policy must cover every target action".into());
            }
        }
        if matches!(self.schedule, LambdaSchedule::Greedy) && self.gamma >= 1.0 {
            return bad("the greedy schedule needs gamma < 1".into());
        }
        if let Some(l) = self.initial_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("initial_lambda must lie in [0, 1], got {l}"));
            }
        }
        if self.steps() == 0 {
            return bad("n_steps must be positive".into());
        }
        if let FeatureMode::Aliased { pairs } = &self.features {
            crate::mdp::aliased_features(self.chain_length, pairs)?;
        }
        self.schedule.validate()
    }

    /// Parses and validates a JSON config. Syntax errors keep serde's
    /// line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `0.1 · 2^j` for `j = −6..=6`.
pub fn default_alpha_grid() -> Vec<f64> {
    (-6..=6).map(|j| 0.1 * 2f64.powi(j)).collect()
}

/// `2^j` for `j ∈ {−16, −8, −4, −2, −1, 0, 1, 2, 4, 8, 16}`.
pub fn default_eta_grid() -> Vec<f64> {
    [-16, -8, -4, -2, -1, 0, 1, 2, 4, 8, 16].iter().map(|&j| 2f64.powi(j)).collect()
}

/// Step size and auxiliary ratio used by the suite.
pub const SUITE_ALPHA: f64 = 0.05;
pub const SUITE_ETA: f64 = 0.0625;

/// The ring-world matrix: on-policy chains of length 10, 25, 50 with
/// γ = 0.99, and off-policy length 10 with μ(right) ∈ {0.85, 0.75} and
/// γ = 0.95, each under every baseline schedule.
pub fn ringworld_suite(base_seed: u64, n_runs: usize) -> Vec<ExperimentConfig> {
    let mut schedules = vec![LambdaSchedule::Greedy, LambdaSchedule::Oracle];
    schedules.extend((0..=10).map(|i| LambdaSchedule::Fixed { value: i as f64 / 10.0 }));
    schedules.push(LambdaSchedule::Decay { k: 10.0 });
    schedules.push(LambdaSchedule::Decay { k: 100.0 });

    let mut bases = Vec::new();
    for n in [10, 25, 50] {
        bases.push((format!("on-n{n}"), n, 0.99, Regime::OnPolicy));
    }
    for mu in [0.85, 0.75] {
        bases.push((format!("off-n10-mu{mu}"), 10, 0.95, Regime::OffPolicy { mu_right: mu }));
    }

    let mut out = Vec::with_capacity(bases.len() * schedules.len());
    for (prefix, n, gamma, regime) in bases {
        for schedule in &schedules {
            let mut c = ExperimentConfig::new(n, gamma, *schedule, SUITE_ALPHA);
            c.name = format!("{prefix}-{}", schedule.label());
            c.regime = regime;
            c.eta = SUITE_ETA;
            c.n_runs = n_runs;
            c.base_seed = base_seed;
            out.push(c);
        }
    }
    out
}
