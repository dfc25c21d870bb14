use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (ridge too small or corrupted kernel)")]
    NotPositiveDefinite,
    #[error("eigendecomposition did not converge within {0} iterations")]
    ConvergenceFailure(usize),
    #[error("correlation {0} lies outside [-1, 1]")]
    DomainError(f64),
    #[error("input has zero norm at layer {layer}")]
    ZeroNormInput { layer: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("loss diverged (value {0})")]
    DivergedLoss(f64),
    #[error("class {class} has {available} examples, {requested} requested")]
    InsufficientClassExamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("covariance has non-finite entries")]
    DegenerateCovariance,
    #[error("worker failed on task {0}")]
    WorkerFailure(u64),
    #[error("assembly aborted: task {task_id} failed {attempts} times")]
    AssemblyAborted { task_id: u64, attempts: usize },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("degenerate distances: {0}")]
    DegenerateDistances(String),
    #[error("kernel is numerically singular on {floored} of {total} eigenvalues")]
    SingularKernel { floored: usize, total: usize },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
