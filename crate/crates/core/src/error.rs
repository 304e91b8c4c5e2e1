use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference state not faithful (smallest symplectic eigenvalue {0})")]
    NotFaithful(f64),
    #[error("hamiltonian has {0} zero mode(s); regularize J first")]
    ZeroModes(usize),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
