use alloc::boxed::Box;
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
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("gradient layouts differ")]
    LayoutMismatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("zero-norm segment `{0}` in cosine distance")]
    ZeroNormSegment(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("epsilon is infinite without noise")]
    InfiniteEpsilon,
    #[error("cannot give {clients} clients a non-empty shard from {samples} samples")]
    TooManyClients { clients: usize, samples: usize },
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("round {round}, class {class}: {source}")]
    InCell {
        round: usize,
        class: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn in_cell(self, round: usize, class: usize) -> Self {
        match self {
            e @ Error::InCell { .. } => e,
            e => Error::InCell {
                round,
                class,
                source: Box::new(e),
            },
        }
    }
}

/// IDX decoding failures; each has its own kind so callers can tell them apart.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}
