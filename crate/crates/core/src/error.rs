use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("time {t} outside [0, {horizon}]")]
    TimeRange { t: f64, horizon: f64 },

    #[error("regime {regime} out of range (chain has {regimes} regimes)")]
    RegimeIndex { regime: usize, regimes: usize },

    #[error("malformed input: {0}")]
    Structural(String),

    #[error("negative transition rate q[{row}][{col}] = {rate}")]
    NegativeRate { row: usize, col: usize, rate: f64 },

    #[error("generator row {row} sums to {sum}, expected 0")]
    Conservation { row: usize, sum: f64 },

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("non-finite value in backward integration at t = {t}")]
    BlowUp { t: f64 },

    #[error("Riccati solution lost positivity at t = {t}, regime {regime}: P = {value}")]
    Positivity { t: f64, regime: usize, value: f64 },

    #[error("gain matrix singular at t = {t}, regime {regime}: {reason}")]
    GainSingularity { t: f64, regime: usize, reason: String },

    #[error("Picard iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("mean-variance problem infeasible: feasibility metric {metric:e} is not positive")]
    Infeasible { metric: f64 },

    #[error("frontier undefined: P0*h20^2 + M1 = {value} is outside (0, 1)")]
    FrontierDomain { value: f64 },

    #[error("volatility not elliptic at t = {t}, regime {regime}: smallest eigenvalue of sigma*sigma' is {min_eigenvalue:e}")]
    Ellipticity { t: f64, regime: usize, min_eigenvalue: f64 },

    #[error("simulation blew up on path {path} at t = {t}")]
    SimulationBlowUp { path: usize, t: f64 },
}
