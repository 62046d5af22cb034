use std::fmt;

use thiserror::Error;

use crate::agents::AgentError;
use crate::engine::EngineError;
use crate::feed::FeedError;
use crate::interventions::InterventionError;
use crate::metrics::MetricsError;
use crate::validation::ValidationError;

/// One or more violated configuration constraints. Validation collects every
/// violation instead of stopping at the first.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError {
            violations: vec![msg.into()],
        }
    }

    pub fn from_violations(violations: Vec<String>) -> Result<(), ConfigError> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations })
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.violations.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than by a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse(_)
                | Error::Feed(FeedError::Config(_))
                | Error::Agent(AgentError::Config(_))
                | Error::Intervention(_)
                | Error::Engine(EngineError::Config(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
