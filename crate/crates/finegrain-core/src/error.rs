//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("label {label} out of range [0, {bound})")]
    LabelOutOfRange { label: usize, bound: usize },

    #[error("relation instance infeasible: {0}")]
    Infeasible(String),

    #[error(
        "enumeration budget exceeded: {states} states > {budget} (use the exact solver instead)"
    )]
    BudgetExceeded { states: f64, budget: f64 },

    #[error("coarse class {class} has {size} members but {required} are required (> L)")]
    ClassTooSmall {
        class: usize,
        size: usize,
        required: usize,
    },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
