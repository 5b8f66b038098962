use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed interchange file. `field` names the offending header or payload part.
    #[error("format error in `{field}`: {message}")]
    Format {
        field: &'static str,
        message: String,
    },

    #[error("invalid shape {shape:?}: {message}")]
    Shape { shape: Vec<usize>, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("missing keyframe output at timestep {timestep} for clip {clip} (frame {frame})")]
    MissingKeyframe {
        timestep: usize,
        clip: usize,
        frame: usize,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed ({context}): {source}")]
    Stage {
        stage: &'static str,
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            field,
            message: message.into(),
        }
    }

    /// Wraps an error with the pipeline stage and coordinates it happened at.
    pub fn in_stage(self, stage: &'static str, context: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by the caller's configuration rather than the data.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Infeasible(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
