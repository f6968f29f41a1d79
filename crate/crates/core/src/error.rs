use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model definition: {0}")]
    ModelDefinition(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simulation diverged on path {path} at time {time}")]
    SimulationDivergence { path: usize, time: usize },

    #[error("matrix {what} is numerically singular")]
    Singular { what: &'static str },

    #[error("{what} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { what: &'static str, min_eigenvalue: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid policy parameters: {0}")]
    Parameter(String),

    #[error("policy structure: {0}")]
    Structural(String),

    #[error("input {value:?} at position {position} is not on the input grid")]
    Encoding { position: usize, value: Vec<f64> },

    #[error("particle weights collapsed at time {time}")]
    FilterDegeneracy { time: usize },

    #[error("oracle misuse: {0}")]
    OracleMisuse(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("input path {replicate} (seed {seed}) failed: {source}")]
    PathFailure {
        seed: u64,
        replicate: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
