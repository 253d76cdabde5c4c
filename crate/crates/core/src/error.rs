use thiserror::Error;

/// Failures while decoding a CTKV weight stream.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic {0:?}, expected \"CTKV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),
    #[error("invalid header field: {0}")]
    BadHeader(String),
    #[error("tensor {0} contains a non-finite value")]
    NonFinite(String),
}

/// Failures while reading a labeled JSONL dataset.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing or mistyped field {field:?}")]
    MissingField { line: usize, field: &'static str },
    #[error("labels are not dense in 0..{classes}: label {label} unused")]
    NonDenseLabels { classes: usize, label: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("address error: {0}")]
    Address(String),
    #[error("oracle guard: {evaluations} coordinate-sample evaluations exceed limit {limit}")]
    Guard { evaluations: u64, limit: u64 },
    #[error("undefined prediction: label-token logit for class {class} is NaN")]
    UndefinedPrediction { class: usize },
    #[error("load error: {0}")]
    Load(#[from] LoadError),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
