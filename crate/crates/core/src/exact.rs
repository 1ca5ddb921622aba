//! Closed-form moments of the return on tabular models.
//!
//! All solvers treat terminal states as absorbing with value zero: the learner
//! never acts from a terminal state, and γ(terminal) = 0 cuts the return at
//! the entering transition. Only [`stationary_distribution`] uses the stored
//! teleport rows, because that is the chain the learner's stream follows.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{importance_ratio, FeatureMap, MdpModel, Policy, RandomStream, StateFn};

const RESIDUAL_TOLERANCE: f64 = 1e-10;
const STATIONARY_TOLERANCE: f64 = 1e-12;
const STATIONARY_MAX_ITERS: usize = 2_000_000;

/// State-to-state view of a model under a fixed policy.
#[derive(Debug, Clone)]
pub struct MarkovChainView {
    /// Teleport-augmented transition matrix.
    pub p_pi: DMatrix<f64>,
    /// `E[R | s, s']`, zero where the pair is unreachable.
    pub r_pairs: DMatrix<f64>,
    /// Expected one-step reward from each state.
    pub r_pi: DVector<f64>,
    /// Stationary distribution of `p_pi`.
    pub d: DVector<f64>,
}

impl MarkovChainView {
    pub fn new(model: &MdpModel, policy: &Policy) -> Result<Self> {
        let n = model.n_states();
        let p_pi = policy_matrix(model, policy, false);
        let mut r_pairs = DMatrix::zeros(n, n);
        for s in 0..n {
            for s2 in 0..n {
                if p_pi[(s, s2)] > 0.0 {
                    let mass: f64 =
                        (0..model.n_actions()).map(|a| policy.prob(s, a) * model.p(s, a, s2) * model.r(s, a, s2)).sum();
                    r_pairs[(s, s2)] = mass / p_pi[(s, s2)];
                }
            }
        }
        let r_pi = DVector::from_fn(n, |s, _| (0..n).map(|s2| p_pi[(s, s2)] * r_pairs[(s, s2)]).sum());
        let d = stationary_distribution(model, policy)?;
        Ok(Self { p_pi, r_pairs, r_pi, d })
    }
}

/// `P_π(s, s')`. With `cut_terminals` the rows of terminal states are zero.
pub fn policy_matrix(model: &MdpModel, policy: &Policy, cut_terminals: bool) -> DMatrix<f64> {
    let n = model.n_states();
    DMatrix::from_fn(n, n, |s, s2| {
        if cut_terminals && model.is_terminal(s) {
            return 0.0;
        }
        (0..model.n_actions()).map(|a| policy.prob(s, a) * model.p(s, a, s2)).sum()
    })
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    // The unbounded QR iteration can stall on some sparse matrices.
    if let Some(schur) = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return schur.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()));
    }
    gelfand_radius(m)
}

/// `lim ‖A^k‖^{1/k}` by repeated squaring with rescaling.
fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut a = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..60 {
        let norm = a.amax();
        if norm == 0.0 {
            return 0.0;
        }
        a /= norm;
        log_scale += norm.ln() / power;
        a = &a * &a;
        power *= 2.0;
    }
    let norm = a.amax();
    if norm == 0.0 {
        return 0.0;
    }
    (log_scale + norm.ln() / power).exp()
}

/// Solves `a x = b` by LU with partial pivoting and re-checks the residual.
fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or_else(|| Error::NoFixedPoint(format!("{what}: singular system")))?;
    let residual = (a * &x - b).amax();
    let scale = b.amax().max(1.0);
    if !residual.is_finite() || residual > RESIDUAL_TOLERANCE * scale {
        return Err(Error::NoFixedPoint(format!("{what}: residual {residual:e} after solve")));
    }
    Ok(x)
}

fn check_sizes(model: &MdpModel, policies: &[&Policy], fns: &[&StateFn]) -> Result<()> {
    let n = model.n_states();
    for p in policies {
        if p.n_states() != n || p.n_actions() != model.n_actions() {
            return Err(Error::LengthMismatch { expected: n, got: p.n_states() });
        }
    }
    for f in fns {
        if f.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: f.len() });
        }
    }
    Ok(())
}

/// True value function `v(s) = Σ_{s'} P_π(s,s')[r(s,s') + γ(s') v(s')]`.
pub fn true_values(model: &MdpModel, policy: &Policy, gamma: &StateFn) -> Result<DVector<f64>> {
    let lambda = StateFn::constant(model.n_states(), 1.0)?;
    let zeros = vec![0.0; model.n_states()];
    lambda_return_values(model, policy, gamma, &lambda, &zeros)
}

/// Expected λ-return `E[G^λ | s]` when bootstrapping on per-state
/// `estimates` (the main learner's `x(s)·w`).
pub fn lambda_return_values(
    model: &MdpModel,
    policy: &Policy,
    gamma: &StateFn,
    lambda: &StateFn,
    estimates: &[f64],
) -> Result<DVector<f64>> {
    check_sizes(model, &[policy], &[gamma, lambda])?;
    let n = model.n_states();
    if estimates.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: estimates.len() });
    }
    let p = policy_matrix(model, policy, true);
    let mut rhs = DVector::zeros(n);
    for s in model.non_terminal_states() {
        for a in 0..model.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..n {
                let pt = model.p(s, a, s2);
                if pt > 0.0 {
                    let boot = gamma.get(s2) * (1.0 - lambda.get(s2)) * estimates[s2];
                    rhs[s] += pa * pt * (model.r(s, a, s2) + boot);
                }
            }
        }
    }
    let discounted = DMatrix::from_fn(n, n, |s, s2| p[(s, s2)] * gamma.get(s2) * lambda.get(s2));
    let rho = spectral_radius(&discounted);
    if rho >= 1.0 {
        return Err(Error::NoFixedPoint(format!("discounted transition matrix has spectral radius {rho}")));
    }
    let a = DMatrix::identity(n, n) - discounted;
    solve_checked(&a, &rhs, "value fixed point")
}

/// Stationary distribution of the teleport-augmented chain, by power
/// iteration on the lazy chain `(I + P_π)/2` (same fixed point, aperiodic).
pub fn stationary_distribution(model: &MdpModel, policy: &Policy) -> Result<DVector<f64>> {
    check_sizes(model, &[policy], &[])?;
    let n = model.n_states();
    let p = policy_matrix(model, policy, false);
    let pt = p.transpose();
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..STATIONARY_MAX_ITERS {
        let stepped = &pt * &d;
        let next = (&d + stepped) * 0.5;
        let change = (&next - &d).lp_norm(1);
        d = next;
        if change < STATIONARY_TOLERANCE {
            let total = d.sum();
            return Ok(d / total);
        }
    }
    Err(Error::Numerical(format!("stationary distribution did not converge in {STATIONARY_MAX_ITERS} iterations")))
}

/// Distribution of `S_t` in the learner's stream: the stationary
/// distribution with terminal states removed and renormalised.
pub fn stream_distribution(model: &MdpModel, policy: &Policy) -> Result<DVector<f64>> {
    let mut d = stationary_distribution(model, policy)?;
    for s in 0..model.n_states() {
        if model.is_terminal(s) {
            d[s] = 0.0;
        }
    }
    let total = d.sum();
    if total <= 0.0 {
        return Err(Error::Numerical("stream never visits a non-terminal state".into()));
    }
    Ok(d / total)
}

/// Expected squared-return model: transition matrix `P̄`, reward `r̄` and the
/// diagonal of `Λ̄`.
#[derive(Debug, Clone)]
pub struct SquaredReturnModel {
    pub p_bar: DMatrix<f64>,
    pub r_bar: DVector<f64>,
    pub lambda_bar_diag: DVector<f64>,
}

/// Builds `P̄(s,s') = Σ_a P(s,a,s') μ(s,a) ρ(s,a)² γ(s')² λ(s')²` and the
/// expected `r̄(s)`, where per transition
/// `r̄ = ρ²Ḡ² + 2ρ²γ(s')λ(s') Ḡ v_first(s')` and
/// `Ḡ = R + γ(s')(1−λ(s')) estimates(s')`.
///
/// `estimates` are the main learner's per-state values `x(s)·w`, and
/// `v_first` is `E[G^λ | s]` (see [`lambda_return_values`]).
#[allow(clippy::too_many_arguments)]
pub fn squared_return_model(
    model: &MdpModel,
    target: &Policy,
    behavior: &Policy,
    gamma: &StateFn,
    lambda: &StateFn,
    lambda_bar: &StateFn,
    estimates: &[f64],
    v_first: &[f64],
) -> Result<SquaredReturnModel> {
    check_sizes(model, &[target, behavior], &[gamma, lambda, lambda_bar])?;
    let n = model.n_states();
    for v in [estimates, v_first] {
        if v.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: v.len() });
        }
    }
    let mut p_bar = DMatrix::zeros(n, n);
    let mut r_bar = DVector::zeros(n);
    for s in model.non_terminal_states() {
        for a in 0..model.n_actions() {
            let mu = behavior.prob(s, a);
            if mu == 0.0 {
                if target.prob(s, a) > 0.0 {
                    return Err(Error::CoverageViolation { state: s, action: a });
                }
                continue;
            }
            let rho = importance_ratio(target, behavior, s, a)?;
            let w = mu * rho * rho;
            for s2 in 0..n {
                let pt = model.p(s, a, s2);
                if pt == 0.0 {
                    continue;
                }
                let (g, l) = (gamma.get(s2), lambda.get(s2));
                p_bar[(s, s2)] += pt * w * g * g * l * l;
                let g_bar = model.r(s, a, s2) + g * (1.0 - l) * estimates[s2];
                r_bar[s] += pt * w * (g_bar * g_bar + 2.0 * g * l * g_bar * v_first[s2]);
            }
        }
    }
    if !r_bar.iter().all(|x: &f64| x.is_finite()) {
        return Err(Error::Numerical("non-finite squared-return reward".into()));
    }
    Ok(SquaredReturnModel { p_bar, r_bar, lambda_bar_diag: DVector::from_column_slice(lambda_bar.values()) })
}

impl SquaredReturnModel {
    /// `P̄ Λ̄`.
    pub fn p_bar_lambda_bar(&self) -> DMatrix<f64> {
        let mut m = self.p_bar.clone();
        for (j, mut col) in m.column_iter_mut().enumerate() {
            col *= self.lambda_bar_diag[j];
        }
        m
    }
}

/// Second moment `m2 = (I − P̄)^{-1} r̄`.
///
/// Fails with [`Error::InfiniteVariance`] when the Neumann series
/// `Σ P̄^t r̄` diverges, i.e. when the spectral radius of `P̄` is at least one.
pub fn second_moment(sq: &SquaredReturnModel) -> Result<DVector<f64>> {
    let n = sq.r_bar.len();
    let radius = spectral_radius(&sq.p_bar);
    if radius >= 1.0 {
        return Err(Error::InfiniteVariance { spectral_radius: radius });
    }
    solve_checked(&(DMatrix::identity(n, n) - &sq.p_bar), &sq.r_bar, "second-moment fixed point")
}

/// Result of the finite-variance check on `P̄ Λ̄`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VarianceCheck {
    /// `max_singular_value < 1`.
    pub passes: bool,
    pub max_singular_value: f64,
    /// Diagnostic: the series `Σ (P̄Λ̄)^t` converges iff this is below one.
    pub spectral_radius: f64,
}

pub fn finite_variance_check(sq: &SquaredReturnModel) -> VarianceCheck {
    let m = sq.p_bar_lambda_bar();
    let max_singular_value = if m.nrows() == 0 { 0.0 } else { m.singular_values().max() };
    VarianceCheck { passes: max_singular_value < 1.0, max_singular_value, spectral_radius: spectral_radius(&m) }
}

/// Exact first and second moments of the (importance-weighted) Monte-Carlo
/// return, per state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMoments {
    pub v: DVector<f64>,
    pub m2: DVector<f64>,
    pub variance: DVector<f64>,
}

impl ExactMoments {
    pub fn from_moments(v: DVector<f64>, m2: DVector<f64>) -> Self {
        let variance = DVector::from_fn(v.len(), |s, _| m2[s] - v[s] * v[s]);
        Self { v, m2, variance }
    }

    /// Variance clamped at zero for reporting.
    pub fn reported_variance(&self, s: usize) -> f64 {
        self.variance[s].max(0.0)
    }
}

/// Moments of the λ = 1 return of `target`, sampled under `behavior`.
pub fn exact_moments(model: &MdpModel, target: &Policy, behavior: &Policy, gamma: &StateFn) -> Result<ExactMoments> {
    let n = model.n_states();
    let v = true_values(model, target, gamma)?;
    let ones = StateFn::constant(n, 1.0)?;
    let zeros = vec![0.0; n];
    let sq = squared_return_model(model, target, behavior, gamma, &ones, &ones, &zeros, v.as_slice())?;
    let m2 = second_moment(&sq)?;
    Ok(ExactMoments::from_moments(v, m2))
}

/// λ from exact moments: `err²/(var + err²)` with
/// `err = v(s_next) − x(s_next)·w`; zero when both terms vanish.
pub fn oracle_lambda(s_next: usize, w: &[f64], exact: &ExactMoments, features: &FeatureMap) -> f64 {
    let err = exact.v[s_next] - crate::vecops::dot(features.x(s_next), w);
    let err_sq = err * err;
    let var = exact.reported_variance(s_next);
    if err_sq + var == 0.0 {
        0.0
    } else {
        err_sq / (var + err_sq)
    }
}

/// Monte-Carlo estimate of `(E[G], E[G²])` from `state`, with actions drawn
/// from `behavior` and the return importance-weighted towards `target`:
/// `G = ρ_0(R_1 + γ_1 ρ_1(R_2 + γ_2 ...))`. Rollouts stop at termination
/// or after `horizon` steps.
#[allow(clippy::too_many_arguments)]
pub fn mc_moments(
    model: &MdpModel,
    target: &Policy,
    behavior: &Policy,
    gamma: &StateFn,
    state: usize,
    n_rollouts: usize,
    horizon: usize,
    rng: &mut RandomStream,
) -> Result<(f64, f64)> {
    check_sizes(model, &[target, behavior], &[gamma])?;
    if n_rollouts == 0 {
        return Err(Error::InvalidSize("at least one rollout is required".into()));
    }
    if model.is_terminal(state) {
        return Ok((0.0, 0.0));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_rollouts {
        let mut s = state;
        let mut weight = 1.0;
        let mut g = 0.0;
        for _ in 0..horizon {
            let a = pick(behavior.row(s), rng.gen::<f64>());
            let s2 = pick(model.row(s, a), rng.gen::<f64>());
            let rho = importance_ratio(target, behavior, s, a)?;
            g += weight * rho * model.r(s, a, s2);
            weight *= rho * gamma.get(s2);
            if weight == 0.0 || model.is_terminal(s2) {
                break;
            }
            s = s2;
        }
        sum += g;
        sum_sq += g * g;
    }
    let n = n_rollouts as f64;
    Ok((sum / n, sum_sq / n))
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
