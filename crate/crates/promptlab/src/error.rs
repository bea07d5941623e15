//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variant names follow the failure classes the
/// public operations document: shape conformance, numeric domain, graph
/// lifecycle, configuration, file format, mixup pairing, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation's shape rule.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value left the numeric domain of an operation (log of a
    /// nonpositive number, normalizing a zero vector, non-finite result).
    #[error("domain error: {0}")]
    Domain(String),

    /// The computation graph was used outside its lifecycle contract,
    /// e.g. backward from a loss that no parameter can reach.
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed container file (bad magic, version, truncation, dims).
    #[error("format error: {0}")]
    Format(String),

    /// A mixup pair could not be formed (same-class operands, or a batch
    /// with fewer than two classes represented).
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Training diverged; carries the global step index at which the
    /// loss stopped being finite.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn pairing(msg: impl Into<String>) -> Self {
        Error::Pairing(msg.into())
    }
}
