//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VflError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    /// The attack targets a density center that ended up with no assigned
    /// samples during label inference.
    #[error("attack aborted: {0}")]
    AttackAbort(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VflError>;
