use thiserror::Error;

/// Errors surfaced by simulation, analysis, estimation, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("horizon must be at least 1")]
    InvalidHorizon,

    #[error("state magnitude exceeded {limit:e} at t = {t}; the simulated system is diverging")]
    StateOverflow { t: usize, limit: f64 },

    #[error("invalid attack plan: {0}")]
    Attack(String),

    #[error("pair (A, C) is not observable")]
    Unobservable,

    #[error("sensor subset {0:?} is not observable")]
    UnobservableSubset(Vec<usize>),

    #[error("no sensor set of size {size} is observable")]
    NoObservableSet { size: usize },

    #[error("riccati iteration did not converge within {0} iterations")]
    RiccatiDivergence(usize),

    #[error("singular innovation covariance: sigma_v = 0 with a rank-deficient output map")]
    SingularInnovation,

    #[error(
        "sparse observability condition theta <= p - 2k violated: theta = {theta}, p = {p}, k = {k}"
    )]
    SparseCondition { theta: usize, p: usize, k: usize },

    #[error("scalar estimator requires n = 1, got n = {0}")]
    NotScalar(usize),

    #[error("scalar estimator requires p >= 2k + 1 sensors, got p = {p}, k = {k}")]
    TooFewSensors { p: usize, k: usize },

    #[error("trace horizon {horizon} too short, need at least {needed}")]
    InsufficientHorizon { horizon: usize, needed: usize },

    #[error("window of length {len} admits no complete residue group for mu = {mu}")]
    WindowTooShort { len: usize, mu: usize },

    #[error("sensor {sensor} is not part of the filter's sensor set {set:?}")]
    SensorOutsideSet { sensor: usize, set: Vec<usize> },

    #[error("invalid window: {0}")]
    Window(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
