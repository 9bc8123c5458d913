//! Simulation and diagnostics for piecewise-deterministic Markov processes
//! (PDMPs) whose randomness lives entirely in the jump mechanism: between
//! jumps the state follows one of finitely many deterministic semiflows, and
//! at exponentially distributed jump times the state is pushed through a
//! randomly drawn transformation while the active semiflow is re-selected by
//! a place-dependent switching matrix.
//!
//! The crate provides:
//!
//! - [`model`]: immutable, closed-form model descriptions plus a registry of
//!   built-in example systems;
//! - [`simulate`]: exact event-driven simulation of the post-jump chain and
//!   its continuous-time interpolation, with reproducible parallel streams;
//! - [`operators`]: the one-step Markov operators `P`, `G`, `W` as samplers
//!   and empirical push-forwards, and the deterministic n-step composition
//!   maps with their path weights;
//! - [`metrics`]: the mode-penalised product metric, the Fortet–Mourier
//!   distance between empirical measures (computed as exact min-cost
//!   transport under the truncated ground metric), and geometric-rate fits;
//! - [`diagnostics`]: numerical certificates — time-Jacobian rank probes,
//!   path-weight positivity, anchor suggestion, accessibility search,
//!   small-set estimation, ergodicity hypothesis falsification, and an
//!   empirical atomic-vs-diffuse classifier for sampled invariant measures.

pub mod diagnostics;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod simulate;
mod transport;

#[doc(hidden)]
pub mod testutil;

pub use metrics::{EmpiricalMeasure, MetricConfig};
pub use model::{Mode, PdmpModel, State};
pub use simulate::RngStream;

/// Crate version, echoed into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("mode {mode} out of range 1..={n_modes}")]
    InvalidMode { mode: usize, n_modes: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("invalid parameter '{name}': {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("state outside the declared state space")]
    OutOfSpace,
    #[error("rejection sampler exceeded {attempts} attempts at y={y:?}; envelope bound is too loose")]
    EnvelopeTooLoose { attempts: usize, y: Vec<f64> },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("time {t} beyond simulated horizon {horizon}; simulate more steps")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("empirical measure is empty")]
    EmptyMeasure,
    #[error("empirical measure not normalized (total weight {0})")]
    NotNormalized(f64),
    #[error("need at least {need} atoms, got {got}")]
    TooFewAtoms { need: usize, got: usize },
    #[error("invalid path specification: {0}")]
    InvalidPath(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("finite-difference step shrank below 1e-12 at t[{index}]={t}")]
    FdStepTooSmall { index: usize, t: f64 },
    #[error("non-finite Jacobian entry at ({row},{col})")]
    NonFiniteJacobian { row: usize, col: usize },
    #[error("all distances are at the noise floor; already converged — reduce n or enlarge samples")]
    AlreadyConverged,
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
