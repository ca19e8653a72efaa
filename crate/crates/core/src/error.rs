use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("{layer}: non-finite activation")]
    NonFiniteActivation { layer: &'static str },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("scene generation failed after {attempts} attempts")]
    SceneGeneration { attempts: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("rollout aborted at iteration {iteration}, step {step}: {detail}")]
    RolloutDiverged {
        iteration: usize,
        step: usize,
        detail: String,
    },
    #[error("training halted after {0} consecutive non-finite gradients")]
    Diverged(usize),
    #[error("degenerate dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
