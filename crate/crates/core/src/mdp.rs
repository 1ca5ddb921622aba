//! Tabular MDPs, the ring-world benchmark, policies and feature maps.
//!
//! Episodes are flattened into one continuing stream. Terminal states carry a
//! discount of zero and the caller teleports to [`MdpModel::restart_state`]
//! before sampling the next transition. The stored transition rows of a
//! terminal state encode that teleport (probability one to the restart state,
//! zero reward), which keeps every row stochastic and gives the
//! teleport-augmented chain used for stationary distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seedable random stream used by every sampler in the crate.
///
/// The algorithm is ChaCha with 8 rounds as implemented by `rand_chacha`; a
/// given seed produces the same stream on every platform.
pub type RandomStream = ChaCha8Rng;

pub fn random_stream(seed: u64) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed)
}

const ROW_TOLERANCE: f64 = 1e-12;

/// Ring-world action indices.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    // Flattened [s][a][s'].
    transition: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    restart_state: usize,
}

impl MdpModel {
    /// Builds a model from flattened `[s][a][s']` transition and reward
    /// tensors, validating row sums and the restart state.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        restart_state: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidSize("model needs at least one state and one action".into()));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len {
            return Err(Error::LengthMismatch { expected: len, got: transition.len() });
        }
        if reward.len() != len {
            return Err(Error::LengthMismatch { expected: len, got: reward.len() });
        }
        if terminal.len() != n_states {
            return Err(Error::LengthMismatch { expected: n_states, got: terminal.len() });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::InvalidModel(format!("P[{s}][{a}] has an entry outside [0,1]")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOLERANCE {
                    return Err(Error::InvalidModel(format!("P[{s}][{a}] sums to {total}")));
                }
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidModel("non-finite reward".into()));
        }
        if restart_state >= n_states || terminal[restart_state] {
            return Err(Error::InvalidModel(format!(
                "restart state {restart_state} must be a valid non-terminal state"
            )));
        }
        Ok(Self { n_states, n_actions, transition, reward, terminal, restart_state })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn restart_state(&self) -> usize {
        self.restart_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.reward[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// Transition row `P[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    /// Largest absolute reward in the model.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// States from which the learner acts.
    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(move |&s| !self.terminal[s])
    }
}

/// A function from states to `[0,1]`, used for state-based γ, λ and λ̄.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFn(Vec<f64>);

impl StateFn {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ContractViolation(format!("state function value {v} outside [0,1]")));
        }
        Ok(Self(values))
    }

    pub fn constant(n_states: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_states])
    }

    /// Constant discount on non-terminal states and zero on terminal states.
    pub fn discount(model: &MdpModel, gamma: f64) -> Result<Self> {
        Self::new(model.terminal.iter().map(|&t| if t { 0.0 } else { gamma }).collect())
    }

    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.0[s]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stochastic policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::InvalidSize("policy needs at least one state and action".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::LengthMismatch { expected: n_actions, got: row.len() });
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidModel(format!("policy row {s} has an entry outside [0,1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidModel(format!("policy row {s} sums to {total}")));
            }
            probs.extend_from_slice(row);
        }
        Ok(Self { n_actions, probs })
    }

    /// Two-action ring-world policy taking "right" with probability `p_right`.
    pub fn ring(n_states: usize, p_right: f64) -> Result<Self> {
        let mut row = vec![0.0; 2];
        row[LEFT] = 1.0 - p_right;
        row[RIGHT] = p_right;
        Self::new(vec![row; n_states])
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// Linear feature map: one fixed-length vector per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_features: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if n_features == 0 {
            return Err(Error::InvalidSize("feature map needs at least one state and feature".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n_features) {
            return Err(Error::LengthMismatch { expected: n_features, got: bad.len() });
        }
        Ok(Self { n_features, rows })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn x(&self, s: usize) -> &[f64] {
        &self.rows[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Same map with terminal states sent to the zero vector, so bootstrapped
    /// values there are exactly zero.
    pub fn with_terminals_zeroed(&self, model: &MdpModel) -> Result<Self> {
        if model.n_states() != self.rows.len() {
            return Err(Error::LengthMismatch { expected: model.n_states(), got: self.rows.len() });
        }
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(s, r)| if model.is_terminal(s) { vec![0.0; self.n_features] } else { r.clone() })
            .collect();
        Ok(Self { n_features: self.n_features, rows })
    }

    /// Linear estimates `x(s)·w` for every state.
    pub fn estimates(&self, w: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|x| crate::vecops::dot(x, w)).collect()
    }
}

/// One sampled environment step `(S_t, A_t, R_{t+1}, S_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub reward: f64,
    pub terminated: bool,
}

/// Builds the ring-world and its target policy.
///
/// State `0` is the −1 terminal, state `n-1` the +1 terminal; the two are
/// adjacent on the ring. The non-terminal arc is `1..=n-2`. Moving right
/// from `n-2` enters the +1 terminal, moving left from `1` enters the −1
/// terminal; every other reward is zero. Restarts happen at
/// `ceil((n-2)/2)`, the middle of the arc.
pub fn build_ringworld(n: usize) -> Result<(MdpModel, Policy)> {
    if n < 4 {
        return Err(Error::InvalidSize(format!("ring-world needs at least 4 states, got {n}")));
    }
    let n_actions = 2;
    let arc = n - 2;
    let restart = arc.div_ceil(2);
    let mut transition = vec![0.0; n * n_actions * n];
    let mut reward = vec![0.0; n * n_actions * n];
    let mut terminal = vec![false; n];
    terminal[0] = true;
    terminal[n - 1] = true;
    for s in 0..n {
        for a in 0..n_actions {
            let base = (s * n_actions + a) * n;
            if terminal[s] {
                transition[base + restart] = 1.0;
                continue;
            }
            let s_next = if a == RIGHT { (s + 1) % n } else { (s + n - 1) % n };
            transition[base + s_next] = 1.0;
            reward[base + s_next] = match s_next {
                0 => -1.0,
                x if x == n - 1 => 1.0,
                _ => 0.0,
            };
        }
    }
    let model = MdpModel::new(n, n_actions, transition, reward, terminal, restart)?;
    let target = Policy::ring(n, 0.95)?;
    Ok((model, target))
}

#[inline]
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the cumulative sum; take the last
    // index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws `A_t ~ policy[s]` then `S_{t+1} ~ P[s][A_t]`, consuming exactly two
/// uniforms from `rng`.
pub fn sample_step(model: &MdpModel, policy: &Policy, s: usize, rng: &mut RandomStream) -> Result<Transition> {
    if s >= model.n_states() {
        return Err(Error::ContractViolation(format!("state {s} out of range")));
    }
    if model.is_terminal(s) {
        return Err(Error::ContractViolation(format!(
            "cannot sample from terminal state {s}; teleport to the restart state first"
        )));
    }
    let a = sample_index(policy.row(s), rng.gen::<f64>());
    let s_next = sample_index(model.row(s, a), rng.gen::<f64>());
    Ok(Transition { s, a, s_next, reward: model.r(s, a, s_next), terminated: model.is_terminal(s_next) })
}

/// `π(s,a) / μ(s,a)`.
pub fn importance_ratio(target: &Policy, behavior: &Policy, s: usize, a: usize) -> Result<f64> {
    let mu = behavior.prob(s, a);
    if mu <= 0.0 {
        return Err(Error::CoverageViolation { state: s, action: a });
    }
    Ok(target.prob(s, a) / mu)
}

/// One-hot identity features.
pub fn tabular_features(n_states: usize) -> Result<FeatureMap> {
    aliased_features(n_states, &[])
}

/// One-hot features where each pair of states shares a single feature.
pub fn aliased_features(n_states: usize, alias_pairs: &[(usize, usize)]) -> Result<FeatureMap> {
    if n_states == 0 {
        return Err(Error::InvalidSize("feature map needs at least one state".into()));
    }
    let mut partner: Vec<Option<usize>> = vec![None; n_states];
    for &(a, b) in alias_pairs {
        if a >= n_states || b >= n_states {
            return Err(Error::InvalidAliasing(format!("pair ({a}, {b}) references a state outside 0..{n_states}")));
        }
        if a == b || partner[a].is_some() || partner[b].is_some() {
            return Err(Error::InvalidAliasing(format!("pair ({a}, {b}) overlaps another pair")));
        }
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    let mut index = vec![0usize; n_states];
    let mut next = 0;
    for s in 0..n_states {
        match partner[s] {
            Some(p) if p < s => index[s] = index[p],
            _ => {
                index[s] = next;
                next += 1;
            }
        }
    }
    let rows = index
        .iter()
        .map(|&i| {
            let mut row = vec![0.0; next];
            row[i] = 1.0;
            row
        })
        .collect();
    FeatureMap::new(rows)
}
