use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },

    /// The forward orbit left the finite region (non-finite or |x|_inf > 1e8).
    #[error("orbit blew up at step {step}{}: {detail}", member_suffix(*member))]
    BlowUp {
        step: usize,
        member: Option<usize>,
        detail: String,
    },

    #[error("diffusion coefficient {value} is not positive at step {step}{}", member_suffix(*member))]
    NonPositiveDiffusion {
        step: usize,
        member: Option<usize>,
        value: f64,
    },

    #[error("schedule value {value} at step {step} is negative or not finite")]
    InvalidSchedule { step: usize, value: f64 },

    /// The backward covector grew beyond the abort threshold.
    #[error(
        "covector blew up at step {step}{}; local expansion rate ~{suggested_alpha:.3}, try alpha above it",
        member_suffix(*member)
    )]
    CovectorBlowUp {
        step: usize,
        member: Option<usize>,
        suggested_alpha: f64,
    },

    #[error("orbit too short: {0}")]
    OrbitTooShort(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

fn member_suffix(member: Option<usize>) -> String {
    match member {
        Some(m) => format!(" (ensemble member {m})"),
        None => String::new(),
    }
}

impl Error {
    /// Tags a simulation or sweep error with the ensemble member that raised it.
    pub fn with_member(self, id: usize) -> Self {
        match self {
            Error::BlowUp { step, detail, .. } => Error::BlowUp {
                step,
                member: Some(id),
                detail,
            },
            Error::NonPositiveDiffusion { step, value, .. } => Error::NonPositiveDiffusion {
                step,
                member: Some(id),
                value,
            },
            Error::CovectorBlowUp {
                step,
                suggested_alpha,
                ..
            } => Error::CovectorBlowUp {
                step,
                member: Some(id),
                suggested_alpha,
            },
            other => other,
        }
    }
}
