use thiserror::Error;

/// Errors surfaced by the simulator, the learners and the verification tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("coverage gap at epoch {epoch}: {visible} satellites visible, cluster needs {required}")]
    CoverageGap { epoch: u64, visible: usize, required: usize },

    #[error("satellite {sat_id} is below the horizon of user {user_id} (elevation {elevation_deg:.3} deg)")]
    NotVisible { sat_id: usize, user_id: usize, elevation_deg: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("delay buffer holds no observation for epoch {0}")]
    MissingEpoch(u64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
