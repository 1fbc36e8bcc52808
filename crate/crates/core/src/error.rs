use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to point at the
/// offending record, edge, or term rather than just the failure class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("edge ({i}, {j}) out of bounds for {n_users} users x {n_hosts} hosts")]
    EdgeOutOfBounds {
        i: usize,
        j: usize,
        n_users: usize,
        n_hosts: usize,
    },

    #[error("duplicate covariate assignment for node {node} in group {group}")]
    DuplicateCovariate { node: usize, group: String },

    #[error("rate overflow on edge ({i}, {j})")]
    RateOverflow { i: usize, j: usize },

    #[error("non-finite objective: {term} evaluated to {value}")]
    NonFiniteObjective { term: &'static str, value: f64 },

    #[error("requested {requested} negative cells but only {available} are eligible")]
    NegativePoolExhausted { requested: usize, available: usize },

    #[error("scores contain only one class; AUC is undefined")]
    SingleClass,

    #[error("non-finite score for pair ({i}, {j})")]
    NonFiniteScore { i: usize, j: usize },

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint kind {found:?} does not match expected {expected:?}")]
    CheckpointKind { found: String, expected: String },

    #[error("iteration did not converge: {0}")]
    IterationFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
