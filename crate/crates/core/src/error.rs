use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid position: coordinate {0} is not finite")]
    InvalidPosition(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Every violated parameter invariant, in field order.
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("envelope violation: acceptance ratio {ratio} exceeds 1 (check gamma constants)")]
    EnvelopeViolation { ratio: f64 },

    #[error("no particle with id {0}")]
    MissingParticle(u64),

    #[error("the system is empty")]
    EmptySystem,

    #[error("query radius {radius} exceeds index cell side {cell_side}")]
    UnsupportedRadius { radius: f64, cell_side: f64 },

    #[error("kernel under-resolved: {0}")]
    UnderResolvedKernel(String),

    #[error("stability guard violated: {0}")]
    Stability(String),

    #[error("numerical instability: density {value} at cell {cell} is materially negative")]
    NegativeDensity { cell: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    /// True for errors caused by bad user input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidPosition(_)
                | Error::DimensionMismatch { .. }
                | Error::InvalidParams(_)
                | Error::InvalidConfig(_)
                | Error::UnderResolvedKernel(_)
                | Error::Stability(_)
                | Error::ShapeMismatch(_)
        )
    }
}
