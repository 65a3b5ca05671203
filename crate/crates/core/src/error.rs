use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("row length mismatch at row {row}: expected {expected} values, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("label out of range at row {row}: {label} is not in [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        classes: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("unparsable value at row {row}: {value:?}")]
    Parse { row: usize, value: String },

    #[error("probabilities at row {row} are invalid: {reason}")]
    InvalidProbabilities { row: usize, reason: String },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("truncated binary file: {0}")]
    Truncated(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operation requires {expected} scores")]
    WrongKind { expected: &'static str },

    #[error("infeasible split: requested {requested} rows from {available}")]
    InfeasibleSplit { requested: usize, available: usize },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("rank {rank} out of range [1, {classes}]")]
    RankOutOfRange { rank: usize, classes: usize },

    #[error("length mismatch: {sets} prediction sets but {labels} labels")]
    LengthMismatch { sets: usize, labels: usize },

    #[error("set size {size} falls in no stratum")]
    UncoveredSize { size: usize },

    #[error("tuning split too small: {rows} rows, need at least {min}")]
    TuningTooSmall { rows: usize, min: usize },

    #[error("class count mismatch: model was calibrated with K={model}, scores have K={scores}")]
    ClassCountMismatch { model: usize, scores: usize },

    #[error("invalid model file: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from unreadable or missing files rather than
    /// bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
