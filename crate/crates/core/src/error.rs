use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which term of the training objective produced a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Contrast,
    Neighborhood,
}

impl fmt::Display for LossComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossComponent::Contrast => f.write_str("contrast"),
            LossComponent::Neighborhood => f.write_str("neighborhood"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("parameter shapes are not congruent: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: LossComponent },
    #[error("classes not covered by any client: {0:?}")]
    UncoveredClasses(Vec<usize>),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed frame: {0}")]
    Frame(#[from] crate::transport::FrameError),
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: u32,
        round: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    PathIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::PathIo { path, source }
    }
}
