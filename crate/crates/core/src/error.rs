use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("model load error: {0}")]
    ModelLoad(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("budget exceeded for image {image}: {counter} charge past allocation {allocation} during {phase}")]
    BudgetExceeded {
        image: usize,
        counter: &'static str,
        allocation: u64,
        phase: String,
    },

    #[error("grid oracle refused: {points} grid points exceeds cap {cap}")]
    GridTooLarge { points: u128, cap: u128 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
