use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not an MVOL file (bad magic)")]
    BadMagic(PathBuf),
    #[error("unsupported MVOL version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated MVOL data: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("non-finite voxel at flat index {0}")]
    NonFiniteVoxel(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("requested {requested} classes but only {available} abnormality templates exist")]
    TooManyClasses { requested: usize, available: usize },
    #[error("resize target dimension {0} is below 2")]
    ResizeTarget(usize),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("text projection collapsed to the zero vector")]
    DegenerateProjection,
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("volume {dims:?} is smaller than the minimum edge {min}")]
    InputTooSmall { dims: [usize; 3], min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss { epoch: usize, batch: usize, norms: String },
    #[error("frozen component `{0}` changed during training")]
    FrozenMutated(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("AUC is undefined when labels contain a single class")]
    UndefinedAuc,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("perplexity {perplexity} is infeasible for {n} points (need 3 * perplexity < n)")]
    Perplexity { perplexity: f64, n: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("schedule: t_max must be >= 1 and t <= t_max (t = {t}, t_max = {t_max})")]
    Schedule { t: usize, t_max: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Param(#[from] volalign_autodiff::ShapeError),
    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::InvalidRecord(_)
                | Error::Manifest(_)
                | Error::Config(_)
                | Error::TooManyClasses { .. }
                | Error::ResizeTarget(_)
                | Error::UnknownModality(_)
                | Error::InputTooSmall { .. }
                | Error::InsufficientData(_)
                | Error::Perplexity { .. }
                | Error::ClassIndex { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
