use std::path::PathBuf;

use crate::relevance::HeadId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate query: no query-token rows")]
    DegenerateQuery,

    #[error("unknown document index {0}")]
    UnknownDocument(usize),

    #[error("empty head list")]
    EmptyHeadList,

    #[error("empty head set")]
    EmptyHeadSet,

    #[error("head {0} not present in score matrix")]
    HeadNotInMatrix(HeadId),

    #[error("missing attention records for heads: {}", format_heads(.0))]
    MissingRecords(Vec<HeadId>),

    #[error("invalid attention record: {0}")]
    InvalidRecord(String),

    #[error("invalid score matrix: {0}")]
    InvalidMatrix(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("pool size {k} exceeds available heads {available}")]
    PoolTooLarge { k: usize, available: usize },

    #[error("oracle limited to <= 16 heads (got {0})")]
    OracleTooLarge(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("{0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable, machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DegenerateQuery
            | Error::UnknownDocument(_)
            | Error::InvalidRecord(_)
            | Error::InvalidMatrix(_)
            | Error::MissingRecords(_) => "invalid-data",
            Error::EmptyHeadList | Error::EmptyHeadSet | Error::HeadNotInMatrix(_) => {
                "invalid-selection"
            }
            Error::Empty(_) => "empty-input",
            Error::PoolTooLarge { .. } | Error::OracleTooLarge(_) | Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Parse { .. } | Error::Json { .. } => "parse",
            Error::Lineage(_) => "lineage",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

fn format_heads(heads: &[HeadId]) -> String {
    heads
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
