use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("item index {item} out of range (model has {n_items} items)")]
    ItemIndex { item: usize, n_items: usize },

    #[error("class index {class} out of range (model has {n_classes} classes)")]
    ClassIndex { class: usize, n_classes: usize },

    #[error("invalid parameters: {}", join_violations(.0))]
    InvalidParams(Vec<Violation>),

    #[error("invalid response data: {0}")]
    InvalidData(String),

    #[error("invalid quadrature grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure for respondent {respondent}: {what}")]
    Numerical { respondent: usize, what: String },

    #[error("posterior table is not normalized for respondent {respondent} (row sum {sum})")]
    UnnormalizedPosterior { respondent: usize, sum: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
