use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports. `name()` gives the stable identifier
/// used by the CLI (`ERROR <Name>: <detail>`) and the HTTP error bodies.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    MissingColumn(String),
    #[error("no data rows in {0}")]
    EmptyDataset(String),
    #[error("row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("{0}")]
    EmptyAfterFilter(String),
    #[error("{0}")]
    ClassTooSmall(String),
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{predictions} predictions vs {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("labels {0:?} exceed a binary task")]
    MoreThanTwoLabels(Vec<String>),
    #[error("no reports to compare")]
    NoReports,
    #[error("{0}")]
    DegenerateCounts(String),
    #[error("training data holds only label {0:?}")]
    SingleClassTrainSet(String),
    #[error("{0}")]
    ModelNotLoaded(String),
    #[error("{0}")]
    IncompatibleCheckpoint(String),
    #[error("{0}")]
    RuntimeUnavailable(String),
    #[error("no type models: {0}")]
    EmptyTypeSet(String),
    #[error("{0}")]
    UnknownModel(String),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("name {0:?} already registered")]
    NameTaken(String),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::MalformedRow { .. } => "MalformedRow",
            Error::EmptyAfterFilter(_) => "EmptyAfterFilter",
            Error::ClassTooSmall(_) => "ClassTooSmall",
            Error::IoFailure { .. } => "IoFailure",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::MoreThanTwoLabels(_) => "MoreThanTwoLabels",
            Error::NoReports => "NoReports",
            Error::DegenerateCounts(_) => "DegenerateCounts",
            Error::SingleClassTrainSet(_) => "SingleClassTrainSet",
            Error::ModelNotLoaded(_) => "ModelNotLoaded",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::RuntimeUnavailable(_) => "RuntimeUnavailable",
            Error::EmptyTypeSet(_) => "EmptyTypeSet",
            Error::NameTaken(_) => "NameTaken",
            Error::UnknownModel(_) => "UnknownModel",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Runtime(_) => "RuntimeFailure",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
