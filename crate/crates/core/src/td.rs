//! Linear GTD(λ) with state-based discount and trace parameters.

use crate::error::{Error, Result};
use crate::vecops::{all_finite, dot, try_dot};

/// Main learner weights `w`, auxiliary weights `h` and eligibility trace `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtdState {
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub e: Vec<f64>,
    pub alpha: f64,
    pub alpha_h: f64,
    steps: usize,
}

impl GtdState {
    pub fn new(n_features: usize, alpha: f64, alpha_h: f64) -> Self {
        Self { w: vec![0.0; n_features], h: vec![0.0; n_features], e: vec![0.0; n_features], alpha, alpha_h, steps: 0 }
    }

    pub fn n_features(&self) -> usize {
        self.w.len()
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One GTD(λ) update; returns the TD error.
    ///
    /// ```text
    /// e ← ρ_t (γ_t λ_t e + x_t)
    /// δ ← R + γ_{t+1} x_{t+1}·w − x_t·w
    /// w ← w + α (δ e − γ_{t+1}(1−λ_{t+1}) (e·h) x_{t+1})
    /// h ← h + α_h (δ e − (x_t·h) x_t)
    /// ```
    ///
    /// `γ_t, λ_t` belong to the state the previous transition arrived in, so
    /// a terminal arrival (γ = 0) clears the trace on the next step even
    /// after a teleport. `w` and `h` are both updated from the pre-step `δ`,
    /// `e` and `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn gtd_step(
        &mut self,
        x_t: &[f64],
        x_next: &[f64],
        reward: f64,
        rho_t: f64,
        gamma_t: f64,
        gamma_next: f64,
        lambda_t: f64,
        lambda_next: f64,
    ) -> Result<f64> {
        let n = self.w.len();
        for x in [x_t, x_next] {
            if x.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: x.len() });
            }
        }
        let decay = gamma_t * lambda_t;
        for (e, &x) in self.e.iter_mut().zip(x_t) {
            *e = rho_t * (decay * *e + x);
        }
        let delta = reward + gamma_next * dot(x_next, &self.w) - dot(x_t, &self.w);
        let eh = dot(&self.e, &self.h);
        let hx = dot(x_t, &self.h);
        let correction = gamma_next * (1.0 - lambda_next) * eh;
        for i in 0..n {
            self.w[i] += self.alpha * (delta * self.e[i] - correction * x_next[i]);
            self.h[i] += self.alpha_h * (delta * self.e[i] - hx * x_t[i]);
        }
        let step = self.steps;
        self.steps += 1;
        if !delta.is_finite() {
            return Err(Error::Divergence { step, what: "TD error" });
        }
        if !all_finite(&self.w) || !all_finite(&self.h) || !all_finite(&self.e) {
            return Err(Error::Divergence { step, what: "GTD weights" });
        }
        Ok(delta)
    }

    /// Clears the eligibility trace; weights are untouched.
    pub fn reset_trace(&mut self) {
        self.e.iter_mut().for_each(|e| *e = 0.0);
    }
}

/// Linear value estimate `x·w`.
pub fn predict(w: &[f64], x: &[f64]) -> Result<f64> {
    try_dot(w, x)
}
