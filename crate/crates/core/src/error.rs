use thiserror::Error;

use crate::ocp::SegmentSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric input: wrong lengths, non-finite values, negative times.
    #[error("invalid input: {0}")]
    Input(String),

    /// A response-time matrix row whose nonzero entries are not strictly increasing.
    #[error("schedule error at joint {joint}, column {column}: {reason}")]
    Schedule {
        joint: usize,
        column: usize,
        reason: String,
    },

    /// Physical or solver parameters outside their admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("time {t} outside [0, {t_final})")]
    Range { t: f64, t_final: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    /// Control law or dynamics produced a non-finite value mid-integration.
    #[error("integration aborted at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("infeasible segment: {0}")]
    Infeasible(String),

    /// Segment NLP hit its iteration cap; the best iterate found is attached.
    #[error("segment solver did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        best: Box<SegmentSolution>,
    },

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
