use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Backend,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("interaction for student {student} has order_index {got}, not after {last}")]
    OutOfOrder { student: String, got: u64, last: u64 },

    #[error("unknown dimension {0}")]
    UnknownDimension(String),

    #[error("empty outcome history")]
    EmptyHistory,

    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("discrimination must be positive, got {0}")]
    NonPositiveDiscrimination(f64),

    #[error("no interactions to fit")]
    NoData,

    #[error("{path}:{line}: unknown relation {relation:?} (expected prereq or assoc)")]
    BadRelation {
        path: PathBuf,
        line: u64,
        relation: String,
    },

    #[error("unknown concept {0:?}")]
    UnknownConcept(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("concept for question {question:?} could not be resolved (label {label:?})")]
    ConceptUnresolved { question: String, label: String },

    #[error("knowledge base has no candidate students besides the target")]
    EmptyPopulation,

    #[error("template is missing slot {{{{{0}}}}}")]
    TemplateSlotMissing(String),

    #[error("template lint: {0}")]
    TemplateLint(String),

    #[error("unparseable predictor response")]
    Unparseable,

    #[error("request timed out")]
    Timeout,

    #[error("rate limited by endpoint")]
    RateLimited,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no usable evaluation records")]
    NoUsableRecords,

    #[error("leakage detected: {count} test student(s) present in knowledge base (e.g. {example:?})")]
    LeakageDetected { count: usize, example: String },

    #[error("source overlap: {0}")]
    SourceOverlap(String),

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),

    #[error("id {id:?} appears in sources {first:?} and {second:?}")]
    IdCollision {
        id: String,
        first: String,
        second: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::TemplateSlotMissing(_) | Error::TemplateLint(_) => {
                ErrorClass::Config
            }
            Error::Unparseable
            | Error::Timeout
            | Error::RateLimited
            | Error::Backend(_) => ErrorClass::Backend,
            _ => ErrorClass::Data,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfOrder { .. } => "OutOfOrder",
            Error::UnknownDimension(_) => "UnknownDimension",
            Error::EmptyHistory => "EmptyHistory",
            Error::MissingColumn { .. } => "MissingColumn",
            Error::UnreadableFile { .. } => "UnreadableFile",
            Error::InsufficientData(_) => "InsufficientData",
            Error::NonPositiveDiscrimination(_) => "NonPositiveDiscrimination",
            Error::NoData => "NoData",
            Error::BadRelation { .. } => "BadRelation",
            Error::UnknownConcept(_) => "UnknownConcept",
            Error::UnknownNode(_) => "UnknownNode",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::ConceptUnresolved { .. } => "ConceptUnresolved",
            Error::EmptyPopulation => "EmptyPopulation",
            Error::TemplateSlotMissing(_) => "TemplateSlotMissing",
            Error::TemplateLint(_) => "TemplateLint",
            Error::Unparseable => "Unparseable",
            Error::Timeout => "Timeout",
            Error::RateLimited => "RateLimited",
            Error::Backend(_) => "BackendError",
            Error::Config(_) => "ConfigError",
            Error::NoUsableRecords => "NoUsableRecords",
            Error::LeakageDetected { .. } => "LeakageDetected",
            Error::SourceOverlap(_) => "SourceOverlap",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
            Error::IdCollision { .. } => "IdCollision",
            Error::Io { .. } => "Io",
            Error::Malformed { .. } => "Malformed",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
