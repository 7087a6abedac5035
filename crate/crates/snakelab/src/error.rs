use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("invalid degree sequence: {0}")]
    InvalidDegrees(String),
    #[error("invalid edge-label sequence: {0}")]
    InvalidEdgeLabels(String),
    #[error("invalid offspring law: {0}")]
    InvalidLaw(String),
    #[error("rejection budget exhausted after {0} attempts")]
    BudgetExhausted(u64),
    #[error("invalid displacement model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
