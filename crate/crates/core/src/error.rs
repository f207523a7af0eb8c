//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Domain` marks arguments outside a function's mathematical domain,
/// `Config` marks scenario/dimension problems (e.g. a precoder that needs
/// more antennas than an AP has), and `Infeasible` marks well-posed inputs
/// whose answer does not exist (a rate target outside the achievable
/// region). Callers that want to distinguish "you called this wrong" from
/// "this scenario cannot meet its requirements" match on the variant.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("iteration limit reached: {0}")]
    MaxIterations(String),
}

pub type Result<T> = std::result::Result<T, Error>;
