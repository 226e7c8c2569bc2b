use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid specification: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-positive discrete local volatility {value} at maturity {maturity}, strike {strike}")]
    NonPositiveDlv {
        maturity: usize,
        strike: usize,
        value: f64,
    },

    #[error("static arbitrage: {kind} violated at maturity {maturity}, strike {strike} (magnitude {magnitude:e})")]
    StaticArbitrage {
        kind: String,
        maturity: usize,
        strike: usize,
        magnitude: f64,
    },

    #[error("degenerate price grid at maturity {maturity}, strike {strike}: {reason}")]
    DegeneratePrices {
        maturity: usize,
        strike: usize,
        reason: String,
    },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("coordinate {coordinate} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        coordinate: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("query (tau = {tau}, strike = {strike}) outside the interpolation lattice")]
    OutsideLattice { tau: f64, strike: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("activation cache does not match the network: {0}")]
    StaleCache(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("{skipped} of {total} conditions had no converged change of measure")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("configuration: {0}")]
    Config(String),

    #[error("data row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
