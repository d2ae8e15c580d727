use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown system `{name}`; available builtins: {}", available.join(", "))]
    Catalog { name: String, available: Vec<String> },

    #[error("invalid value for `{field}`: {value} (allowed: {allowed})")]
    Validation {
        field: String,
        value: String,
        allowed: String,
    },

    #[error("orbit diverged at {at}: {reason}")]
    Divergence { at: Escape, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("tangent propagator overflow (norm {norm:.3e}); integrate over a shorter time")]
    Overflow { norm: f64 },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{}", render_context(system, *orbit, operation, source))]
    Context {
        system: String,
        orbit: Option<usize>,
        operation: String,
        #[source]
        source: Box<Error>,
    },
}

/// Where an orbit left its domain: an iterate index for maps, a time for flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Escape {
    Iteration(u64),
    Time(f64),
}

impl fmt::Display for Escape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Escape::Iteration(i) => write!(f, "iteration {i}"),
            Escape::Time(t) => write!(f, "time {t}"),
        }
    }
}

fn render_context(system: &str, orbit: Option<usize>, operation: &str, source: &Error) -> String {
    match orbit {
        Some(i) => format!("{system} -> orbit {i} -> {operation}: {source}"),
        None => format!("{system} -> {operation}: {source}"),
    }
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn validation(
        field: impl Into<String>,
        value: impl fmt::Display,
        allowed: impl Into<String>,
    ) -> Self {
        Error::Validation {
            field: field.into(),
            value: value.to_string(),
            allowed: allowed.into(),
        }
    }

    /// Wraps the error with its provenance (system, orbit index, operation).
    pub fn context(self, system: &str, orbit: Option<usize>, operation: &str) -> Self {
        Error::Context {
            system: system.to_string(),
            orbit,
            operation: operation.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping provenance wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }
}
