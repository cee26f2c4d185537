use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value is outside the domain an operation accepts.
    #[error("validation error: {0}")]
    Validation(String),

    /// An op failed while evaluating a graph node.
    #[error("at node `{node}`: {source}")]
    AtNode {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("backward pass needs the activation of node `{0}`, which was not retained")]
    MissingActivation(String),

    #[error("unknown class directory `{0}`")]
    Labeling(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("failed to load `{path}`: {source}")]
    Record {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_node(node: &str, source: Error) -> Self {
        Error::AtNode {
            node: node.to_string(),
            source: Box::new(source),
        }
    }

    /// Strips `AtNode`/`Record` wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::AtNode { source, .. } | Error::Record { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}

pub(crate) use dim_err;
pub(crate) use invalid;
