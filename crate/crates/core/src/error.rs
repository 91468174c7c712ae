use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid variance schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} outside 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("invalid sampler step: {0}")]
    InvalidStep(String),

    #[error("model is frozen; parameters cannot be updated")]
    Frozen,

    #[error("task {0} requires a teacher snapshot but none was given")]
    MissingTeacher(usize),

    #[error("task index must be >= 1")]
    InvalidTaskIndex,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid soft targets: {0}")]
    InvalidTargets(String),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no metrics to plot")]
    EmptyMetrics,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}
