use std::fmt;

use thiserror::Error;

/// Which StructureGraph invariant a validation pass found broken first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphViolation {
    NonOnehotRow,
    LabelOnAbsentPart,
    AsymmetricE,
    SelfLoop,
    EdgeOnAbsentPart,
    RowCountMismatch,
}

impl GraphViolation {
    pub fn code(self) -> &'static str {
        match self {
            GraphViolation::NonOnehotRow => "NON_ONEHOT_ROW",
            GraphViolation::LabelOnAbsentPart => "LABEL_ON_ABSENT_PART",
            GraphViolation::AsymmetricE => "ASYMMETRIC_E",
            GraphViolation::SelfLoop => "SELF_LOOP",
            GraphViolation::EdgeOnAbsentPart => "EDGE_ON_ABSENT_PART",
            GraphViolation::RowCountMismatch => "ROW_COUNT_MISMATCH",
        }
    }
}

impl fmt::Display for GraphViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid structure graph: {0}")]
    InvalidGraph(GraphViolation),
    #[error("DEGENERATE_CLOUD: {0}")]
    DegenerateCloud(String),
    #[error("NO_EXISTING_PART: existence vector has no set entry")]
    NoExistingPart,
    #[error("IO_ERROR: {0}")]
    Io(#[from] std::io::Error),
    #[error("SCHEMA_VERSION_MISMATCH: {0}")]
    SchemaVersionMismatch(String),
    #[error("CORRUPT_RECORD: {0}")]
    CorruptRecord(String),
    #[error("GEOMETRY_INFEASIBLE: {0}")]
    GeometryInfeasible(String),
    #[error("MISSING_GRADIENT: parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("NONDETERMINISTIC_LOSS: {first} != {second}")]
    NondeterministicLoss { first: f64, second: f64 },
    #[error("NONFINITE_STATE: {0}")]
    NonfiniteState(String),
    #[error("INVALID_RANGE: {0}")]
    InvalidRange(String),
    #[error("CHECKPOINT_MISMATCH: {0}")]
    CheckpointMismatch(String),
    #[error("EMPTY_CLOUD")]
    EmptyCloud,
    #[error("SIZE_MISMATCH: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("EMPTY_SET")]
    EmptySet,
    #[error("UNDERTRAINED_PREDICTOR: held-out accuracy {accuracy:.4} below gate {gate}")]
    UndertrainedPredictor { accuracy: f64, gate: f64 },
    #[error("DATASET_INVALID: {0}")]
    DatasetInvalid(String),
    #[error("NONFINITE_LOSS at step {step}")]
    NonfiniteLoss { step: usize },
    #[error("PREDICTOR_REQUIRED: structure consistency needs a predictor file")]
    PredictorRequired,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonfiniteState(_) | Error::NonfiniteLoss { .. } => 3,
            Error::UndertrainedPredictor { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
