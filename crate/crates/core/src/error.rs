use thiserror::Error;

use crate::orbital::SatelliteId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid or inconsistent user-supplied configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A cluster or link can never satisfy its connectivity requirement.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A visibility search ran past the end of the computed pattern.
    #[error("visibility horizon exhausted after t = {after_s:.3} s (horizon {horizon_s:.3} s)")]
    HorizonExhausted { after_s: f64, horizon_s: f64 },

    /// The orbit-side plan contradicts the announced global update instant.
    #[error("scheduling inconsistency: {0}")]
    Scheduling(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("missing local update from satellite {0}")]
    MissingLocal(SatelliteId),

    #[error("numeric divergence in local epoch {epoch}")]
    Divergence { epoch: u32 },

    #[error(
        "deadline violation in slot {slot}: cluster {cluster} delivered at {arrival_s:.3} s, \
         global update scheduled at {deadline_s:.3} s"
    )]
    DeadlineViolation {
        slot: u32,
        cluster: usize,
        arrival_s: f64,
        deadline_s: f64,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
