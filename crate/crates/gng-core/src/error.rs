//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by schedule construction, priors, operators, solvers and
/// the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    /// Grid index outside `0..=t_max`.
    #[error("time index {index} out of range 0..={t_max}")]
    IndexOutOfRange { index: usize, t_max: usize },

    /// Invalid schedule-strategy parameter (e.g. `p <= 1`, `sigma <= 0`).
    #[error("invalid schedule parameter: {0}")]
    Parameter(String),

    /// Timestep allocation produced two equal consecutive steps.
    #[error("timestep allocation degenerate at index {index}: T_start = {t_start} is too small for {m} steps")]
    Allocation {
        index: usize,
        t_start: usize,
        m: usize,
    },

    /// Schedule point with alpha = sigma = 0.
    #[error("degenerate schedule point: alpha = 0 and sigma = 0")]
    DegenerateSchedule,

    /// Noise prediction requires sigma > 0.
    #[error("noise prediction undefined at sigma = 0")]
    DivisionDegenerate,

    /// Vector/matrix dimensions do not match.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Closed-form solver requested for a nonlinear operator.
    #[error("closed-form solver requires a linear operator")]
    UnsupportedSolver,

    /// Objective blew up or produced non-finite values.
    #[error("optimizer diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    /// SNR-scaled lambda at sigma = 0.
    #[error("SNR-scaled lambda undefined at sigma = 0")]
    DegenerateSnr,

    /// Contraction-based check called with q >= 1.
    #[error("inexact-update bound inapplicable: contraction factor q = {q} >= 1")]
    Inapplicable { q: f64 },

    /// Matrix factorization failed (not SPD / singular).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Configuration file could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure while reading configs or writing reports.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
