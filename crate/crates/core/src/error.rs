use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while ingesting data, evaluating the joint model or fitting it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("incomplete visit: subject {subject_id} visit {visit_index} is missing a breast")]
    IncompleteVisit { subject_id: String, visit_index: u32 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate image record ({subject_id}, visit {visit_index}, {side}, {view})")]
    DuplicateImage {
        subject_id: String,
        visit_index: u32,
        side: String,
        view: String,
    },
    #[error("event before entry for subject {0}")]
    EventBeforeEntry(String),
    #[error("subject {0} has no events entry")]
    MissingEvents(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("age {age} outside spline support [{lo}, {hi}]")]
    OutsideSupport { age: f64, lo: f64, hi: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("cannot place baseline knots: no observed events")]
    NoEvents,
    #[error("slope link requires differentiable design")]
    NotDifferentiable,
    #[error("invalid interval [{a}, {b}]")]
    InvalidInterval { a: f64, b: f64 },
    #[error("hazard undefined before entry (t = {t}, entry = {t0})")]
    BeforeEntry { t: f64, t0: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate sub-posterior: split {split}, coefficient {coefficient}")]
    DegenerateSubPosterior { split: usize, coefficient: usize },
    #[error("split {0} has no events")]
    SplitWithoutEvents(usize),
    #[error("a single split was requested; use plain fit")]
    UsePlainFit,
    #[error("window exceeds model support: {end} > {hi}")]
    WindowOutsideSupport { end: f64, hi: f64 },
    #[error("landmark {landmark} precedes the first measurement at {first}")]
    LandmarkBeforeHistory { landmark: f64, first: f64 },
    #[error("censoring support exhausted at {0}")]
    CensoringExhausted(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("score sets cover different subjects")]
    MismatchedSubjects,
    #[error("non-finite target density: {0}")]
    NonFiniteTarget(String),
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
