use thiserror::Error;

use crate::kernels::KernelKind;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("hyperbolic kernel argument has norm {norm}, must be < 1")]
    HpbOutsideBall { norm: f64 },

    #[error("non-finite score{}", locate(*.component, *.row, *.word))]
    NonFiniteScore {
        component: Option<usize>,
        row: Option<usize>,
        word: Option<usize>,
    },

    #[error("norm-expansion scoring does not apply to kernel `{0}`")]
    WrongKernelKind(KernelKind),

    #[error("invalid hyperparameter `{name}` = {value}: {reason}")]
    InvalidHyperparameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid kernel spec `{spec}`: {reason}")]
    KernelSpecParse { spec: String, reason: String },

    #[error("target {target} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("grid is empty")]
    EmptyGrid,

    #[error("divergence detected at step {step}{}", component.map(|k| format!(" (component {})", k + 1)).unwrap_or_default())]
    DivergenceDetected { step: u64, component: Option<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn locate(component: Option<usize>, row: Option<usize>, word: Option<usize>) -> String {
    let mut parts = Vec::new();
    if let Some(k) = component {
        parts.push(format!("component {}", k + 1));
    }
    if let Some(b) = row {
        parts.push(format!("row {b}"));
    }
    if let Some(v) = word {
        parts.push(format!("word {v}"));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!(" at {}", parts.join(", "))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn with_component(self, k: usize) -> Self {
        match self {
            Error::NonFiniteScore { row, word, .. } => Error::NonFiniteScore {
                component: Some(k),
                row,
                word,
            },
            other => other,
        }
    }
}
