use std::path::PathBuf;

use thiserror::Error;

/// Input outside the domain of a generator, divergence, or distribution routine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("value {value} at index {index} is outside the domain ({expected})")]
    OutOfDomain {
        index: usize,
        value: f64,
        expected: &'static str,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter {name} = {value} is out of range {range}")]
    Parameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    Parse {
        path: PathBuf,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: {kind} '{name}' is not in the training vocabulary")]
    UnknownName {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        name: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("{kind} id {id} out of range (size {size})")]
    Index {
        kind: &'static str,
        id: usize,
        size: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header mismatch: {}", .0.join(", "))]
    HeaderMismatch(Vec<String>),
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss spec: {0}")]
    Spec(String),
    #[error("missing frequency counts: {0}")]
    MissingCounts(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("optimizer did not converge after {steps} steps (gradient max-norm {grad_norm:e})")]
    NotConverged { steps: usize, grad_norm: f64 },
    #[error("world too large for enumeration: {0}")]
    TooLarge(String),
    #[error("objective spec invalid: {0}")]
    Spec(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}
