use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `backward` was called on a value with more than one element.
    NonScalarLoss { shape: Vec<usize> },
    /// An optimizer step found a trainable tensor without a gradient.
    MissingGrad { param: usize },
    /// Row orthonormalization met (numerically) dependent rows.
    RankDeficient { row: usize, condition: f64 },
    /// Vector or matrix dimension does not match the model width.
    DimensionMismatch { expected: usize, found: usize },
    TokenOutOfRange { token: usize, vocab: usize },
    LayerOutOfRange { layer: usize, num_layers: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    EmptyTaskData,
    NoLabelPositions,
    MisalignedSignatures { lhs: usize, rhs: usize },
    UnknownTask(u32),
    UnknownGroup(usize),
    IncompleteMatrix { rows: usize, expected: usize },
    TaskTooSmall { train: usize },
    InvalidConfig(String),
    /// A stage of the stream pipeline failed for a specific task.
    Stage {
        task: u32,
        stage: &'static str,
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGrad { param } => write!(f, "parameter {param} has no gradient"),
            Error::RankDeficient { row, condition } => write!(
                f,
                "rows are linearly dependent at row {row} (condition estimate {condition:.3e})"
            ),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "expected dimension {expected}, found {found}")
            }
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of size {vocab}")
            }
            Error::LayerOutOfRange { layer, num_layers } => {
                write!(f, "layer {layer} outside model with {num_layers} layers")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::EmptySequence => write!(f, "empty token sequence"),
            Error::EmptyTaskData => write!(f, "task has no training examples"),
            Error::NoLabelPositions => write!(f, "batch has no label positions"),
            Error::MisalignedSignatures { lhs, rhs } => write!(
                f,
                "signatures cover different label positions ({lhs} vs {rhs})"
            ),
            Error::UnknownTask(id) => write!(f, "unknown task id {id}"),
            Error::UnknownGroup(gid) => write!(f, "unknown group id {gid}"),
            Error::IncompleteMatrix { rows, expected } => write!(
                f,
                "evaluation matrix has {rows} complete rows, expected {expected}"
            ),
            Error::TaskTooSmall { train } => {
                write!(f, "task has {train} training examples, need at least 2")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Stage {
                task,
                stage,
                source,
            } => write!(f, "task {task} failed during {stage}: {source}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub(crate) fn at_stage(self, task: u32, stage: &'static str) -> Error {
        Error::Stage {
            task,
            stage,
            source: alloc::boxed::Box::new(self),
        }
    }
}
