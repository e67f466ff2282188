use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("label conflict in sentence {0}: change talk and sustain talk merged together")]
    LabelConflict(String),

    #[error("channel `{0}` has no observed values")]
    AllMissing(String),

    #[error("degenerate framing: bust height {0} is below epsilon")]
    DegenerateFraming(f64),

    #[error("sentence {sentence}: feature file {path} does not exist")]
    DanglingPath { sentence: String, path: PathBuf },

    #[error("no available modality")]
    NoAvailableModality,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },

    #[error("non-finite loss at batch {0}")]
    NonFiniteLoss(usize),

    #[error("backward requested without a forward trace")]
    MissingTrace,

    #[error("modality mismatch: checkpoint has [{checkpoint}], input has [{input}]")]
    ModalityMismatch { checkpoint: String, input: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0} holds artifacts from a prior run; pass --resume or --overwrite")]
    PriorRun(PathBuf),

    #[error("{path} was produced with config hash {recorded}, current config hashes to {current}")]
    ConfigMismatch {
        path: PathBuf,
        recorded: String,
        current: String,
    },

    #[error("missing input for stage `{stage}`: {path} does not exist")]
    MissingStageInput { stage: &'static str, path: PathBuf },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Parameter(_) => "parameter",
            Error::LabelConflict(_) => "label_conflict",
            Error::AllMissing(_) => "all_missing",
            Error::DegenerateFraming(_) => "degenerate_framing",
            Error::DanglingPath { .. } => "dangling_path",
            Error::NoAvailableModality => "no_available_modality",
            Error::Empty(_) => "empty",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::MissingTrace => "missing_trace",
            Error::ModalityMismatch { .. } => "modality_mismatch",
            Error::Config(_) => "config",
            Error::PriorRun(_) => "prior_run",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::MissingStageInput { .. } => "missing_stage_input",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True for errors caught by validation before any side effect.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_)
                | Error::ModalityMismatch { .. }
                | Error::Config(_)
                | Error::PriorRun(_)
                | Error::ConfigMismatch { .. }
                | Error::MissingStageInput { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            message: message.into(),
        }
    }
}
