use thiserror::Error;

pub type Result<T, E = DtcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DtcError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("object placement failed after {retries} retries (min separation {min_separation})")]
    Placement { retries: usize, min_separation: f64 },

    #[error("caption error: {0}")]
    Caption(String),

    #[error("region {index}: box has no pixel footprint on a {h}x{w} grid")]
    EmptyFootprint { index: usize, h: usize, w: usize },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("config hash mismatch: checkpoint {checkpoint}, current {current}")]
    ConfigHashMismatch { checkpoint: String, current: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation setup failed: {0}")]
    Evaluation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}
