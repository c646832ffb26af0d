use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    /// A closed form evaluated exactly at one of its poles.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "unmasking rate is singular at t={t}: 1 - kappa = {gap:e} is below the floor {floor:e}"
    )]
    Singularity { t: f64, gap: f64, floor: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("no support sequence is consistent with the revealed tokens: {0}")]
    Inconsistent(String),

    #[error("training failed at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("support size exceeds the cap of {cap} sequences")]
    CapExceeded { cap: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
