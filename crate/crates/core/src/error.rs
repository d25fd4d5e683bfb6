use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its admissible domain.
    #[error("parameter `{name}` out of domain: {value} ({reason})")]
    Domain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// Shapes or indices that must agree do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input file content is malformed or inconsistent.
    #[error("{file}:{line}: field `{field}`: {message}")]
    Ingestion {
        file: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Starting state has a non-finite log-posterior.
    #[error("initialization failed: non-finite log-posterior in {component}")]
    Initialization { component: String },

    /// A fitted model failed the R-hat gate.
    #[error("convergence gate failed: {0}")]
    Convergence(String),

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("no posterior samples: {0}")]
    EmptySamples(String),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::Domain { name, value, reason }
    }

    pub(crate) fn ingestion(
        file: impl Into<String>,
        line: usize,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Ingestion {
            file: file.into(),
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
