//! The λ-greedy trace adapter and the baseline λ schedules.
//!
//! λ-greedy keeps two auxiliary learners on the behaviour stream: `w_err`
//! estimates the first moment of the Monte-Carlo return (GTD with λ = 1)
//! and `w_sq` its second moment (VTD with λ̄ = 1). The emitted parameter is
//! the minimiser of a one-step bias-variance trade-off,
//! `λ = err² / (Var + err²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{oracle_lambda, ExactMoments};
use crate::mdp::FeatureMap;
use crate::td::GtdState;
use crate::vecops::dot;
use crate::vtd::{bar_quantities, VtdState};

/// `err_sq / (var_g + err_sq)`, or 0 when both vanish.
pub fn lambda_from_bias_variance(err_sq: f64, var_g: f64) -> Result<f64> {
    if !(err_sq >= 0.0) || !(var_g >= 0.0) {
        return Err(Error::NegativeInput(format!("err_sq = {err_sq}, var_g = {var_g}")));
    }
    let total = err_sq + var_g;
    Ok(if total == 0.0 { 0.0 } else { err_sq / total })
}

/// Sampling regime, used to pick the initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyRegime {
    OnPolicy,
    OffPolicy,
}

/// Magnitude of the initial `w_sq` in the off-policy regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffPolicyInit {
    /// `w_sq = (r_max / (1 − γ))² · 1`.
    #[default]
    Squared,
    /// `w_sq = r_max / (1 − γ) · 1`.
    Linear,
}

/// Auxiliary learners of λ-greedy plus the diagnostics of the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGreedyState {
    /// First-moment learner; `err.w` is `w_err` and `err.e` its trace.
    pub err: GtdState,
    /// Second-moment learner with λ̄ ≡ 1.
    pub vtd: VtdState,
    /// `γ̄` of the previous transition, which decays `z̄`.
    pub gamma_bar_prev: f64,
    pub g_bar: f64,
    pub err_sq: f64,
    pub var_g: f64,
}

impl LambdaGreedyState {
    /// Fails unless `0 ≤ γ < 1`.
    pub fn new(
        n_features: usize,
        regime: GreedyRegime,
        gamma_const: f64,
        r_max: f64,
        alpha: f64,
        off_policy_init: OffPolicyInit,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma_const) {
            return Err(Error::InvalidConfig(format!("λ-greedy needs 0 ≤ γ < 1, got {gamma_const}")));
        }
        let scale = r_max / (1.0 - gamma_const);
        let mut err = GtdState::new(n_features, alpha, 0.0);
        let mut vtd = VtdState::new(n_features, alpha);
        match regime {
            GreedyRegime::OnPolicy => err.w.fill(scale),
            GreedyRegime::OffPolicy => vtd.w_sq.fill(match off_policy_init {
                OffPolicyInit::Squared => scale * scale,
                OffPolicyInit::Linear => scale,
            }),
        }
        Ok(Self { err, vtd, gamma_bar_prev: 0.0, g_bar: 0.0, err_sq: 0.0, var_g: 0.0 })
    }

    pub fn w_err(&self) -> &[f64] {
        &self.err.w
    }

    pub fn w_sq(&self) -> &[f64] {
        &self.vtd.w_sq
    }

    /// λ implied by the current weights at `x` without learning.
    pub fn lambda_at(&self, w_main: &[f64], x: &[f64]) -> f64 {
        let g = dot(x, &self.err.w);
        let err = g - dot(x, w_main);
        let var = (dot(x, &self.vtd.w_sq) - g * g).max(0.0);
        lambda_from_bias_variance(err * err, var).unwrap_or(0.0)
    }

    /// Learns from one transition and returns `λ_{t+1}` for `x_next`.
    /// Must run before the main learner's update on the same transition.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        w_main: &[f64],
        x_t: &[f64],
        x_next: &[f64],
        reward: f64,
        rho_t: f64,
        gamma_t: f64,
        gamma_next: f64,
    ) -> Result<f64> {
        let g_bar = dot(x_next, &self.err.w);
        self.err.gtd_step(x_t, x_next, reward, rho_t, gamma_t, gamma_next, 1.0, 1.0)?;

        let q = bar_quantities(rho_t, gamma_next, 1.0, reward, 0.0, g_bar);
        self.vtd.vtd_step(x_t, x_next, q.r_bar, q.gamma_bar, self.gamma_bar_prev, 1.0, 1.0)?;
        self.gamma_bar_prev = q.gamma_bar;

        let err = g_bar - dot(x_next, w_main);
        self.g_bar = g_bar;
        self.err_sq = err * err;
        self.var_g = (dot(x_next, &self.vtd.w_sq) - g_bar * g_bar).max(0.0);
        lambda_from_bias_variance(self.err_sq, self.var_g)
            .map_err(|_| Error::Divergence { step: self.err.steps() - 1, what: "λ-greedy estimates" })
    }
}

/// How λ is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Greedy,
    Fixed {
        value: f64,
    },
    /// `k / (k + t)`.
    Decay {
        k: f64,
    },
    /// λ-greedy computed from exact moments.
    Oracle,
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaSchedule::Fixed { value } if !(0.0..=1.0).contains(&value) => {
                Err(Error::InvalidConfig(format!("fixed λ must lie in [0, 1], got {value}")))
            }
            LambdaSchedule::Decay { k } if !(k > 0.0 && k.is_finite()) => {
                Err(Error::InvalidConfig(format!("decay constant must be positive, got {k}")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in file names and reports.
    pub fn label(&self) -> String {
        match *self {
            LambdaSchedule::Greedy => "greedy".into(),
            LambdaSchedule::Oracle => "oracle".into(),
            LambdaSchedule::Fixed { value } => format!("fixed-{value}"),
            LambdaSchedule::Decay { k } => format!("decay-{k}"),
        }
    }
}

/// Inputs of one λ-greedy step.
#[derive(Debug)]
pub struct GreedyStep<'a> {
    pub state: &'a mut LambdaGreedyState,
    pub w_main: &'a [f64],
    pub x_t: &'a [f64],
    pub x_next: &'a [f64],
    pub reward: f64,
    pub rho_t: f64,
    pub gamma_t: f64,
    pub gamma_next: f64,
}

/// Exact moments for the oracle schedule.
#[derive(Debug, Clone, Copy)]
pub struct OracleContext<'a> {
    pub exact: &'a ExactMoments,
    pub features: &'a FeatureMap,
    pub w_main: &'a [f64],
}

/// λ for the state `s_next` reached at step `t`.
pub fn schedule_lambda(
    schedule: &LambdaSchedule,
    t: usize,
    s_next: usize,
    greedy: Option<GreedyStep<'_>>,
    oracle: Option<OracleContext<'_>>,
) -> Result<f64> {
    match *schedule {
        LambdaSchedule::Fixed { value } => Ok(value),
        LambdaSchedule::Decay { k } => Ok(k / (k + t as f64)),
        LambdaSchedule::Greedy => {
            let g = greedy.ok_or(Error::MissingContext("λ-greedy state"))?;
            g.state.step(g.w_main, g.x_t, g.x_next, g.reward, g.rho_t, g.gamma_t, g.gamma_next)
        }
        LambdaSchedule::Oracle => {
            let o = oracle.ok_or(Error::MissingContext("exact moments"))?;
            Ok(oracle_lambda(s_next, o.w_main, o.exact, o.features))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_moments;
    use crate::mdp::{build_ringworld, random_stream, sample_step, tabular_features, StateFn};
    use proptest::prelude::*;

    #[test]
    fn bias_variance_cases() {
        assert_eq!(lambda_from_bias_variance(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(lambda_from_bias_variance(3.0, 0.0).unwrap(), 1.0);
        assert_eq!(lambda_from_bias_variance(1.5, 1.5).unwrap(), 0.5);
        assert_eq!(lambda_from_bias_variance(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(lambda_from_bias_variance(-1.0, 1.0), Err(Error::NegativeInput(_))));
        assert!(matches!(lambda_from_bias_variance(1.0, f64::NAN), Err(Error::NegativeInput(_))));
    }

    #[test]
    fn initial_weights() {
        let on = LambdaGreedyState::new(4, GreedyRegime::OnPolicy, 0.99, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        assert!(on.w_err().iter().all(|&w| (w - 100.0).abs() < 1e-9));
        assert!(on.w_sq().iter().all(|&w| w == 0.0));
        let on = LambdaGreedyState::new(4, GreedyRegime::OnPolicy, 0.95, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        assert!(on.w_err().iter().all(|&w| (w - 20.0).abs() < 1e-9));
        let off = LambdaGreedyState::new(4, GreedyRegime::OffPolicy, 0.95, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        assert!(off.w_err().iter().all(|&w| w == 0.0));
        assert!(off.w_sq().iter().all(|&w| (w - 400.0).abs() < 1e-9));
        let lin = LambdaGreedyState::new(4, GreedyRegime::OffPolicy, 0.95, 1.0, 0.1, OffPolicyInit::Linear).unwrap();
        assert!(lin.w_sq().iter().all(|&w| (w - 20.0).abs() < 1e-9));
        for g in [1.0, 1.5] {
            assert!(LambdaGreedyState::new(4, GreedyRegime::OnPolicy, g, 1.0, 0.1, OffPolicyInit::Squared).is_err());
        }
    }

    #[test]
    fn off_policy_start_is_cautious() {
        let mut st =
            LambdaGreedyState::new(3, GreedyRegime::OffPolicy, 0.95, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        let w_main = [0.3, -0.2, 0.1];
        assert!(st.lambda_at(&w_main, &[0.0, 1.0, 0.0]) < 1.0);
        let lambda = st.step(&w_main, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 1.2, 0.95, 0.95).unwrap();
        assert!(st.var_g > 0.0);
        assert!(lambda < 1.0);
    }

    #[test]
    fn exact_first_moment_gives_zero_lambda() {
        let mut st = LambdaGreedyState::new(3, GreedyRegime::OnPolicy, 0.9, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        let w = vec![0.4, 0.7, -0.1];
        st.err.w = w.clone();
        let lambda = st.step(&w, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0, 1.0, 0.9, 0.9).unwrap();
        assert_eq!(st.err_sq, 0.0);
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn empty_second_moment_gives_full_lambda() {
        let mut st = LambdaGreedyState::new(3, GreedyRegime::OnPolicy, 0.9, 1.0, 0.1, OffPolicyInit::Squared).unwrap();
        let lambda = st.step(&[0.0; 3], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 1.0, 0.9, 0.9).unwrap();
        assert_eq!(st.var_g, 0.0);
        assert_eq!(lambda, 1.0);
    }

    #[test]
    fn converged_weights_match_oracle() {
        let (m, pi) = build_ringworld(8).unwrap();
        let g = StateFn::discount(&m, 0.95).unwrap();
        let ex = exact_moments(&m, &pi, &pi, &g).unwrap();
        let f = tabular_features(8).unwrap();
        let mut st = LambdaGreedyState::new(8, GreedyRegime::OnPolicy, 0.95, 1.0, 0.0, OffPolicyInit::Squared).unwrap();
        st.err.w = ex.v.as_slice().to_vec();
        st.vtd.w_sq = ex.m2.as_slice().to_vec();
        let w_main: Vec<f64> = (0..8).map(|s| 0.1 * s as f64 - 0.3).collect();
        for s in m.non_terminal_states() {
            let lambda = st.step(&w_main, f.x(s), f.x(s + 1), 0.0, 1.0, 0.95, 0.95).unwrap();
            let expected = oracle_lambda(s + 1, &w_main, &ex, &f);
            assert!((lambda - expected).abs() < 1e-12, "state {}: {lambda} vs {expected}", s + 1);
        }
    }

    #[test]
    fn current_ratio_does_not_enter_lambda() {
        // Tabular stream over states 0..4; the last transition enters the
        // never-visited state 5, so its weights stay untouched.
        let run = |last_rho: f64| {
            let mut st =
                LambdaGreedyState::new(6, GreedyRegime::OffPolicy, 0.9, 1.0, 0.05, OffPolicyInit::Squared).unwrap();
            let f = tabular_features(6).unwrap();
            let w_main = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
            let path = [0, 1, 2, 3, 2, 1, 2, 3, 4];
            let mut gamma_t = 0.9;
            for pair in path.windows(2) {
                st.step(&w_main, f.x(pair[0]), f.x(pair[1]), 0.5, 1.1, gamma_t, 0.9).unwrap();
                gamma_t = 0.9;
            }
            st.step(&w_main, f.x(4), f.x(5), 1.0, last_rho, gamma_t, 0.9).unwrap()
        };
        let base = run(1.0);
        for rho in [0.0, 0.3, 2.5] {
            assert_eq!(run(rho), base);
        }
    }

    #[test]
    fn lambda_decreases_over_an_on_policy_run() {
        // Averaged over seeds: a single run's λ flickers because the return
        // variance on this chain is tiny and the variance estimate clamps to 0.
        let (n, gamma, alpha, seeds) = (10, 0.99, 0.1, 30);
        let (m, pi) = build_ringworld(n).unwrap();
        let g = StateFn::discount(&m, gamma).unwrap();
        let f = tabular_features(n).unwrap().with_terminals_zeroed(&m).unwrap();
        let mut first_sum = vec![0.0; n];
        let mut last_sum = vec![0.0; n];
        let mut seen = vec![0usize; n];
        let mut series = vec![0.0; 1000];
        for seed in 0..seeds {
            let mut greedy =
                LambdaGreedyState::new(n, GreedyRegime::OnPolicy, gamma, 1.0, alpha, OffPolicyInit::Squared).unwrap();
            let mut main = GtdState::new(n, alpha, alpha * 0.01);
            let mut rng = random_stream(seed);
            let mut s = m.restart_state();
            let (mut gamma_t, mut lambda_t) = (g.get(s), 1.0);
            let mut first = vec![None; n];
            let mut last = vec![None; n];
            for slot in series.iter_mut() {
                let tr = sample_step(&m, &pi, s, &mut rng).unwrap();
                let gn = g.get(tr.s_next);
                let lambda = greedy.step(&main.w, f.x(s), f.x(tr.s_next), tr.reward, 1.0, gamma_t, gn).unwrap();
                main.gtd_step(f.x(s), f.x(tr.s_next), tr.reward, 1.0, gamma_t, gn, lambda_t, lambda).unwrap();
                *slot += lambda / seeds as f64;
                first[tr.s_next].get_or_insert(lambda);
                last[tr.s_next] = Some(lambda);
                gamma_t = gn;
                lambda_t = lambda;
                s = if tr.terminated { m.restart_state() } else { tr.s_next };
            }
            for s in m.non_terminal_states() {
                if let (Some(a), Some(b)) = (first[s], last[s]) {
                    first_sum[s] += a;
                    last_sum[s] += b;
                    seen[s] += 1;
                }
            }
        }
        assert!((series[0] - 1.0).abs() < 1e-12);
        let head: f64 = series[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = series[900..].iter().sum::<f64>() / 100.0;
        assert!(tail < head, "{tail} !< {head}");
        let (mut first_mean, mut last_mean, mut k) = (0.0, 0.0, 0.0);
        for s in m.non_terminal_states().filter(|&s| seen[s] > 0) {
            let (a, b) = (first_sum[s] / seen[s] as f64, last_sum[s] / seen[s] as f64);
            assert!(b <= a, "state {s}: {b} > {a}");
            first_mean += a;
            last_mean += b;
            k += 1.0;
        }
        assert!(last_mean / k < first_mean / k, "{} !< {}", last_mean / k, first_mean / k);
    }

    #[test]
    fn schedule_examples() {
        let d10 = LambdaSchedule::Decay { k: 10.0 };
        assert_eq!(schedule_lambda(&d10, 10, 0, None, None).unwrap(), 0.5);
        let d100 = LambdaSchedule::Decay { k: 100.0 };
        assert_eq!(schedule_lambda(&d100, 0, 0, None, None).unwrap(), 1.0);
        let fixed = LambdaSchedule::Fixed { value: 0.3 };
        for t in [0, 7, 100_000] {
            assert_eq!(schedule_lambda(&fixed, t, 2, None, None).unwrap(), 0.3);
        }
    }

    #[test]
    fn schedule_requires_context() {
        let g = schedule_lambda(&LambdaSchedule::Greedy, 0, 0, None, None);
        assert!(matches!(g, Err(Error::MissingContext(_))));
        let o = schedule_lambda(&LambdaSchedule::Oracle, 0, 0, None, None);
        assert!(matches!(o, Err(Error::MissingContext(_))));
    }

    #[test]
    fn schedule_validation_and_serde() {
        assert!(LambdaSchedule::Fixed { value: 1.2 }.validate().is_err());
        assert!(LambdaSchedule::Decay { k: 0.0 }.validate().is_err());
        assert!(LambdaSchedule::Decay { k: 10.0 }.validate().is_ok());
        let s: LambdaSchedule = serde_json::from_str(r#"{"kind":"fixed","value":0.4}"#).unwrap();
        assert_eq!(s, LambdaSchedule::Fixed { value: 0.4 });
        let s: LambdaSchedule = serde_json::from_str(r#"{"kind":"greedy"}"#).unwrap();
        assert_eq!(s, LambdaSchedule::Greedy);
        assert_eq!(serde_json::to_string(&LambdaSchedule::Decay { k: 10.0 }).unwrap(), r#"{"kind":"decay","k":10.0}"#);
    }

    proptest! {
        #[test]
        fn lambda_in_unit_interval(e in 0.0f64..1e6, v in 0.0f64..1e6) {
            let l = lambda_from_bias_variance(e, v).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn lambda_scale_invariant(e in 1e-3f64..1e3, v in 1e-3f64..1e3, c in 1e-3f64..1e3) {
            let a = lambda_from_bias_variance(e, v).unwrap();
            let b = lambda_from_bias_variance(c * e, c * v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
