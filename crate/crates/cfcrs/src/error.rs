//! Error type of the command line and its exit codes.

use std::path::PathBuf;

use cfcrs_core::counterfactual::CfError;
use cfcrs_core::flm::FlmError;
use cfcrs_core::nn::NeuralError;
use cfcrs_core::pipeline::PipelineError;
use cfcrs_core::recommender::RecError;
use cfcrs_core::schema::SchemaError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: line {line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("{path}: record {record}: {reason}")]
    Parse { path: String, record: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<RecError> for Error {
    fn from(e: RecError) -> Self {
        Error::Pipeline(e.into())
    }
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 for configuration problems, 4 for non-finite numerics, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Pipeline(PipelineError::Config { .. }) => EXIT_CONFIG,
            Error::Pipeline(e) if pipeline_numeric(e) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

fn neural_numeric(e: &NeuralError) -> bool {
    matches!(e, NeuralError::NonFinite | NeuralError::NonFiniteGradient(_))
}

fn rec_numeric(e: &RecError) -> bool {
    matches!(e, RecError::Neural(n) if neural_numeric(n))
}

fn schema_numeric(e: &SchemaError) -> bool {
    matches!(e, SchemaError::Neural(n) if neural_numeric(n))
}

fn flm_numeric(e: &FlmError) -> bool {
    matches!(e, FlmError::Neural(n) if neural_numeric(n))
}

fn pipeline_numeric(e: &PipelineError) -> bool {
    match e {
        PipelineError::Rec(r) => rec_numeric(r),
        PipelineError::Schema(s) => schema_numeric(s),
        PipelineError::Flm(f) => flm_numeric(f),
        PipelineError::Cf(c) => match c {
            CfError::NonFiniteUpdate => true,
            CfError::Flm(f) => flm_numeric(f),
            CfError::Rec(r) => rec_numeric(r),
            CfError::Schema(s) => schema_numeric(s),
            _ => false,
        },
        _ => false,
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
