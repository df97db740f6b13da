use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called on a non-scalar of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    TapeConsumed,
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("age {0} outside 1..=85")]
    AgeOutOfRange(i64),
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("no codebook entry for {key} = {age}")]
    MissingCodebookEntry { key: String, age: u32 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("attention capture was not enabled for this pass")]
    CaptureDisabled,
    #[error("branch `{0}` has no tokens but a nonzero scale")]
    EmptyBranch(&'static str),
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("probe does not beat the constant-mean predictor: mae {probe_mae:.3} vs baseline {baseline_mae:.3}")]
    ProbeUnderfit { probe_mae: f64, baseline_mae: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
