use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: row {row} has no finite entry")]
    DegenerateRow { op: &'static str, row: usize },

    #[error("{0}: mask index set is empty")]
    EmptyMask(&'static str),

    #[error("{context}: index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward expects a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,

    #[error("forward pass is not deterministic: {first:e} then {second:e}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("{what}: {value} is out of range ({expected})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("masking ratio {ratio} over {n_eff} candidates yields {count} masked tokens; need 1..{n_eff}")]
    DegenerateMask { n_eff: usize, ratio: f64, count: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input of {len} bytes does not fit sequence length {n}")]
    Truncation { len: usize, n: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at step {step}: loss={loss} lr={lr:e} grad_norm={grad_norm:e}")]
    NonFinite {
        step: usize,
        lr: f64,
        loss: f64,
        grad_norm: f64,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
