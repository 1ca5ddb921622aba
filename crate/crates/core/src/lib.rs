//! Policy evaluation with state-based trace parameters.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`] tabular MDPs, the ring-world benchmark, policies, importance
//!   ratios and feature maps.
//! * [`exact`] closed-form first and second moments of the return, the
//!   stationary distribution, the finite-variance check and the oracle trace
//!   parameter.
//! * [`td`] linear GTD(λ) with state-based γ and λ.
//! * [`vtd`] variance TD: incremental second-moment estimation of the
//!   λ-return, its validation traces and the Var-MSPBE objective.
//! * [`greedy`] the λ-greedy adapter and the baseline λ schedules.
//! * [`harness`] declarative experiments, seeded multi-run execution,
//!   parameter sweeps and CSV output.

pub mod error;
pub mod exact;
pub mod greedy;
pub mod harness;
pub mod mdp;
pub mod td;
pub mod vecops;
pub mod vtd;

pub use error::{Error, Result};
