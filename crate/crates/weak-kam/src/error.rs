//! Error types shared by every module of the toolkit.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by grid construction, solvers and diagnostics.
///
/// Numerical failures carry the offending quantity so that experiment
/// manifests can echo them verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    /// The Legendre supremum was attained on the boundary of the velocity
    /// ball, which means the configured velocity bound is too small.
    #[error("dual bound exceeded: maximizer speed {speed:.6} reached the velocity bound {bound:.6}")]
    DualBoundExceeded { speed: f64, bound: f64 },

    /// Trajectory speed exceeded 10x the velocity bound; the model or the
    /// step size is bad.
    #[error("trajectory blow-up at t = {t:.6}: speed {speed:.3e} exceeds 10 * {bound:.3e}")]
    BlowUp { t: f64, speed: f64, bound: f64 },

    #[error("orbit closure check failed: |phi_T(z) - z| = {gap:.3e} > {tol:.3e}")]
    NotPeriodic { gap: f64, tol: f64 },

    #[error("critical value estimate did not converge: uncertainty {uncertainty:.3e} > {tol:.3e}")]
    NotConverged { uncertainty: f64, tol: f64 },

    /// The step cannot reach at least two cells: k * dt < 2h.
    #[error("reachability violation: k*dt = {reach:.3e} < 2h = {min_reach:.3e}")]
    ReachabilityViolation { reach: f64, min_reach: f64 },

    #[error("empty horizon window: no admissible epoch")]
    WindowEmpty,

    #[error("insufficient data: {usable} usable epochs, need {needed}")]
    InsufficientData { usable: usize, needed: usize },

    /// The running-min barrier did not stabilize within the horizon cap;
    /// the Aubry hypothesis is likely violated by the model.
    #[error("barrier not stabilized at horizon {horizon}: residual {residual:.3e} > {tol:.3e}")]
    NotStabilized { horizon: usize, residual: f64, tol: f64 },

    #[error("calibration defect {defect:.3e} exceeds budget {budget:.3e}")]
    CalibrationDefect { defect: f64, budget: f64 },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("oscillator index {index} out of range 1..={count}")]
    IndexOutOfRange { index: usize, count: usize },

    /// `<Omega, theta>` is not single-valued on the torus: HJ and barrier
    /// solves reject models with a linear drift term.
    #[error("nonzero drift: Omega[{index}] = {value:.6} but an HJ solve was requested")]
    NonzeroDrift { index: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
