//! Variance TD: incremental estimation of the second moment of the λ-return.
//!
//! The squared λ-return obeys its own Bellman recursion
//! `(G^λ_t)² = r̄_{t+1} + γ̄_{t+1} (G^λ_{t+1})²` with
//!
//! ```text
//! Ḡ_t       = R_{t+1} + γ_{t+1}(1 − λ_{t+1}) x_{t+1}·w
//! r̄_{t+1}   = ρ_t² Ḡ_t² + 2 ρ_t² γ_{t+1} λ_{t+1} Ḡ_t ḡ_{t+1}
//! γ̄_{t+1}   = ρ_t² γ_{t+1}² λ_{t+1}²
//! ```
//!
//! where `ḡ_{t+1}` estimates `E[G^λ_{t+1} | S_{t+1}]`. VTD runs gradient TD on
//! that recursion, with its own trace parameter λ̄.
//!
//! Trace convention: `z̄_t = x_t + γ̄_t λ̄_t z̄_{t−1}` where `γ̄_t` is the value
//! computed on the previous transition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact::SquaredReturnModel;
use crate::mdp::FeatureMap;
use crate::vecops::{all_finite, dot};

/// Per-transition squared-return quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarQuantities {
    /// `Ḡ_t`.
    pub g_bar: f64,
    pub r_bar: f64,
    pub gamma_bar: f64,
}

/// `estimate_next` is the main learner's `x_{t+1}·w`; `g_bar_next` the
/// first-moment estimate `ḡ_{t+1}`.
pub fn bar_quantities(
    rho: f64,
    gamma_next: f64,
    lambda_next: f64,
    reward: f64,
    estimate_next: f64,
    g_bar_next: f64,
) -> BarQuantities {
    let g_bar = reward + gamma_next * (1.0 - lambda_next) * estimate_next;
    let rho_sq = rho * rho;
    BarQuantities {
        g_bar,
        r_bar: rho_sq * g_bar * g_bar + 2.0 * rho_sq * gamma_next * lambda_next * g_bar * g_bar_next,
        gamma_bar: rho_sq * gamma_next * gamma_next * lambda_next * lambda_next,
    }
}

/// How `w_sq` is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VtdMode {
    /// Gradient TD on the squared-return recursion.
    #[default]
    Bootstrap,
    /// Least-mean-squares on Monte-Carlo squared returns, using
    /// `E[(G^λ_t)² x_t] = E[r̄_{t+1} z̄_t]` (no bootstrapping).
    Lms,
}

/// Second-moment weights (`w_sq`, also written `h^var`), auxiliary
/// correction weights `h_sq` and the trace `z̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct VtdState {
    pub w_sq: Vec<f64>,
    pub h_sq: Vec<f64>,
    pub z_bar: Vec<f64>,
    pub alpha_bar: f64,
    pub mode: VtdMode,
    steps: usize,
}

impl VtdState {
    pub fn new(n_features: usize, alpha_bar: f64) -> Self {
        Self {
            w_sq: vec![0.0; n_features],
            h_sq: vec![0.0; n_features],
            z_bar: vec![0.0; n_features],
            alpha_bar,
            mode: VtdMode::Bootstrap,
            steps: 0,
        }
    }

    pub fn with_mode(mut self, mode: VtdMode) -> Self {
        self.mode = mode;
        self
    }

    /// One VTD update; returns `δ̄`.
    ///
    /// `gamma_bar` is `γ̄_{t+1}` for this transition and `gamma_bar_prev`
    /// the `γ̄_t` of the previous one.
    #[allow(clippy::too_many_arguments)]
    pub fn vtd_step(
        &mut self,
        x_t: &[f64],
        x_next: &[f64],
        r_bar: f64,
        gamma_bar: f64,
        gamma_bar_prev: f64,
        lambda_bar_t: f64,
        lambda_bar_next: f64,
    ) -> Result<f64> {
        let n = self.w_sq.len();
        for x in [x_t, x_next] {
            if x.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: x.len() });
            }
        }
        let decay = gamma_bar_prev * lambda_bar_t;
        for (z, &x) in self.z_bar.iter_mut().zip(x_t) {
            *z = x + decay * *z;
        }
        let v_t = dot(x_t, &self.w_sq);
        let delta_bar = r_bar + gamma_bar * dot(x_next, &self.w_sq) - v_t;
        let a = self.alpha_bar;
        match self.mode {
            VtdMode::Bootstrap => {
                let zh = dot(&self.z_bar, &self.h_sq);
                let hx = dot(x_t, &self.h_sq);
                let correction = gamma_bar * (1.0 - lambda_bar_next) * zh;
                for i in 0..n {
                    self.w_sq[i] += a * delta_bar * self.z_bar[i] - a * correction * x_next[i];
                    self.h_sq[i] += a * delta_bar * self.z_bar[i] - a * hx * x_t[i];
                }
            }
            VtdMode::Lms => {
                for i in 0..n {
                    self.w_sq[i] += a * (r_bar * self.z_bar[i] - v_t * x_t[i]);
                }
            }
        }
        let step = self.steps;
        self.steps += 1;
        if !delta_bar.is_finite() || !all_finite(&self.w_sq) || !all_finite(&self.h_sq) || !all_finite(&self.z_bar) {
            return Err(Error::Divergence { step, what: "VTD weights" });
        }
        Ok(delta_bar)
    }
}

/// Variance of the return at `x`: `max(0, x·w_sq − (x·w_err)²)`.
pub fn var_estimate(w_sq: &[f64], w_err: &[f64], x: &[f64]) -> f64 {
    let g = dot(x, w_err);
    (dot(x, w_sq) - g * g).max(0.0)
}

/// Backward-view traces that replace `E[G^λ_{t+1} | S_{t+1}]` in the
/// expected squared-return reward:
///
/// ```text
/// E[r̄_{t+1} z̄_t] = E[ρ_t² Ḡ_t² z̄_t] + 2 E[Ḡ_t (z^r_t + Z^x_t w)]
/// z^r_t = ρ_t γ_t λ_t (ρ_{t−1}² R_t z̄_{t−1} + z^r_{t−1})
/// Z^x_t = ρ_t γ_t λ_t (ρ_{t−1}² γ_t (1 − λ_t) z̄_{t−1} x_tᵀ + Z^x_{t−1})
/// ```
///
/// `Z^x` is `n × n` and only kept when requested; it is identically zero
/// when λ ≡ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredReturnTraces {
    pub z_bar: Vec<f64>,
    pub z_r: Vec<f64>,
    pub z_x: Option<DMatrix<f64>>,
    prev_rho: f64,
    started: bool,
}

impl SquaredReturnTraces {
    pub fn new(n_features: usize, track_matrix: bool) -> Self {
        Self {
            z_bar: vec![0.0; n_features],
            z_r: vec![0.0; n_features],
            z_x: track_matrix.then(|| DMatrix::zeros(n_features, n_features)),
            prev_rho: 0.0,
            started: false,
        }
    }

    /// Advances the traces to time `t`. `reward_t` is `R_t`, the reward of
    /// the transition that arrived in `S_t`; `gamma_t, lambda_t` are the
    /// discount and trace parameter of that arrival.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        rho_t: f64,
        gamma_t: f64,
        lambda_t: f64,
        reward_t: f64,
        x_t: &[f64],
        gamma_bar_t: f64,
        lambda_bar_t: f64,
    ) {
        if self.started {
            let c = rho_t * gamma_t * lambda_t;
            let prev_sq = self.prev_rho * self.prev_rho;
            for (zr, &zb) in self.z_r.iter_mut().zip(&self.z_bar) {
                *zr = c * (prev_sq * reward_t * zb + *zr);
            }
            if let Some(zx) = self.z_x.as_mut() {
                let k = prev_sq * gamma_t * (1.0 - lambda_t);
                let zb = DVector::from_column_slice(&self.z_bar);
                let xt = DVector::from_column_slice(x_t);
                *zx = (&zb * xt.transpose() * k + &*zx) * c;
            }
            let decay = gamma_bar_t * lambda_bar_t;
            for (z, &x) in self.z_bar.iter_mut().zip(x_t) {
                *z = x + decay * *z;
            }
        } else {
            self.z_bar.copy_from_slice(x_t);
            self.started = true;
        }
        self.prev_rho = rho_t;
    }

    /// `z^r_t + Z^x_t w`.
    pub fn reward_trace(&self, w: &[f64]) -> Vec<f64> {
        match &self.z_x {
            Some(zx) => {
                let zw = zx * DVector::from_column_slice(w);
                self.z_r.iter().zip(zw.iter()).map(|(a, b)| a + b).collect()
            }
            None => self.z_r.clone(),
        }
    }
}

/// The Var-MSPBE objective and its gradient, with all expectations taken
/// exactly from a tabular model:
///
/// ```text
/// b(w)       = E[δ̄^λ_t x_t] = Xᵀ D (T̄(Xw) − Xw)
/// C          = E[x_t x_tᵀ] = Xᵀ D X
/// Var-MSPBE  = bᵀ C⁻¹ b
/// ```
///
/// Features that are zero on every visited state (e.g. terminal-only
/// columns) are dropped before inverting `C`.
#[derive(Debug, Clone)]
pub struct VarMspbe {
    x: DMatrix<f64>,
    d: DVector<f64>,
    p_bar: DMatrix<f64>,
    lambda_bar: DVector<f64>,
    /// `(I − P̄Λ̄)⁻¹ r̄`
    base: DVector<f64>,
    /// `(I − P̄Λ̄)⁻¹ P̄ (I − Λ̄)`
    carry: DMatrix<f64>,
    active: Vec<usize>,
    c_inv: DMatrix<f64>,
}

impl VarMspbe {
    /// `d` is the state distribution of the learner's stream.
    pub fn new(sq: &SquaredReturnModel, features: &FeatureMap, d: &DVector<f64>) -> Result<Self> {
        let n = sq.r_bar.len();
        if features.n_states() != n || d.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: features.n_states().min(d.len()) });
        }
        let nf = features.n_features();
        let x = DMatrix::from_fn(n, nf, |s, j| features.x(s)[j]);
        let pl = sq.p_bar_lambda_bar();
        let lu = (DMatrix::identity(n, n) - &pl).lu();
        let base = lu.solve(&sq.r_bar).ok_or_else(|| Error::Numerical("I − P̄Λ̄ is singular".into()))?;
        let mut carry = sq.p_bar.clone();
        for (j, mut col) in carry.column_iter_mut().enumerate() {
            col *= 1.0 - sq.lambda_bar_diag[j];
        }
        let carry = lu.solve(&carry).ok_or_else(|| Error::Numerical("I − P̄Λ̄ is singular".into()))?;
        let dx = DMatrix::from_fn(n, nf, |s, j| d[s] * x[(s, j)]);
        let c = x.transpose() * &dx;
        let active: Vec<usize> = (0..nf).filter(|&j| c[(j, j)] > 0.0).collect();
        let c_act = DMatrix::from_fn(active.len(), active.len(), |i, j| c[(active[i], active[j])]);
        let c_inv = c_act.try_inverse().ok_or_else(|| Error::Numerical("singular feature covariance".into()))?;
        Ok(Self {
            x,
            d: d.clone(),
            p_bar: sq.p_bar.clone(),
            lambda_bar: sq.lambda_bar_diag.clone(),
            base,
            carry,
            active,
            c_inv,
        })
    }

    /// `T̄(Xw)`: expected λ̄-squared-return from every state.
    pub fn squared_return_target(&self, w_sq: &[f64]) -> DVector<f64> {
        let xw = &self.x * DVector::from_column_slice(w_sq);
        &self.base + &self.carry * xw
    }

    /// `E[δ̄^λ_t x_t]`, also the expected VTD update direction `E[δ̄_t z̄_t]`.
    pub fn expected_update(&self, w_sq: &[f64]) -> DVector<f64> {
        let xw = &self.x * DVector::from_column_slice(w_sq);
        let err = self.squared_return_target(w_sq) - xw;
        self.x.transpose() * err.component_mul(&self.d)
    }

    fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.active.len(), |i, _| v[self.active[i]])
    }

    fn expand(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.x.ncols());
        for (i, &j) in self.active.iter().enumerate() {
            out[j] = v[i];
        }
        out
    }

    pub fn value(&self, w_sq: &[f64]) -> f64 {
        let b = self.restrict(&self.expected_update(w_sq));
        (b.transpose() * &self.c_inv * &b)[(0, 0)].max(0.0)
    }

    /// `E[γ̄_{t+1}(1 − λ̄_{t+1}) x_{t+1} z̄_tᵀ]`, from the stationary expected
    /// trace `U = (I − (P̄Λ̄)ᵀ)⁻¹ D X` (row `s` is `d(s) E[z̄_t | S_t = s]`).
    pub fn trace_cross_moment(&self) -> Result<DMatrix<f64>> {
        let n = self.d.len();
        let mut pl = self.p_bar.clone();
        for (j, mut col) in pl.column_iter_mut().enumerate() {
            col *= self.lambda_bar[j];
        }
        let dx = DMatrix::from_fn(n, self.x.ncols(), |s, j| self.d[s] * self.x[(s, j)]);
        let u = (DMatrix::identity(n, n) - pl.transpose())
            .lu()
            .solve(&dx)
            .ok_or_else(|| Error::Numerical("expected-trace system is singular".into()))?;
        let mut weighted = self.p_bar.transpose();
        for (s2, mut row) in weighted.row_iter_mut().enumerate() {
            row *= 1.0 - self.lambda_bar[s2];
        }
        Ok(self.x.transpose() * weighted * u)
    }

    /// `−½∇ Var-MSPBE = b − E[γ̄(1 − λ̄) x' z̄ᵀ] C⁻¹ b`.
    pub fn neg_half_gradient(&self, w_sq: &[f64]) -> Result<DVector<f64>> {
        let b = self.expected_update(w_sq);
        let cb = self.expand(&(&self.c_inv * self.restrict(&b)));
        Ok(&b - self.trace_cross_moment()? * cb)
    }
}

/// Var-MSPBE of `w_sq` under the exact model quantities.
pub fn var_mspbe(sq: &SquaredReturnModel, features: &FeatureMap, d: &DVector<f64>, w_sq: &[f64]) -> Result<f64> {
    Ok(VarMspbe::new(sq, features, d)?.value(w_sq))
}
