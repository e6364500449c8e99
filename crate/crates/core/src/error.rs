use std::path::PathBuf;

use thiserror::Error;

use crate::sampler::TrajectoryLog;
use crate::splat::SplatCloud;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("diffusion step {t} outside 1..={max}")]
    Step { t: usize, max: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("optimizer diverged at iteration {iteration} (loss {loss})")]
    Divergence {
        iteration: usize,
        loss: f64,
        last: Box<SplatCloud>,
    },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("sampler failed at step t={t}: {source}")]
    Sampler {
        t: usize,
        #[source]
        source: Box<Error>,
        log: Box<TrajectoryLog>,
    },

    #[error("denoiser failed at step t={t}: {source}")]
    Denoiser {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn param(message: impl Into<String>) -> Self {
        Error::Parameter(message.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
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
