use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while building topologies and hop partitions.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("graph is disconnected: node {0} is unreachable from the root")]
    DisconnectedGraph(usize),
    #[error("topology must have at least one node and one edge")]
    Empty,
    #[error("node {0} appears in more than one left/right pair")]
    OverlappingPairs(usize),
    #[error("row {0} has no nonzero entry")]
    ZeroRow(usize),
    #[error("adjacency entry ({0}, {1}) is negative or not finite")]
    InvalidEntry(usize, usize),
    #[error("max hop must be at least 1")]
    InvalidMaxHop,
    #[error("unknown topology preset `{0}`")]
    UnknownPreset(String),
}

/// Errors raised by tensor operations on the tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("batch norm needs at least 2 rows in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("temporal kernel spans {span} frames but the input has {frames}")]
    KernelTooLarge { span: usize, frames: usize },
    #[error("temporal kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    DetachedFromTape(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Errors raised while constructing or running graph layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("hop range invalid: need 1 <= S ({s}) <= L ({l})")]
    InvalidHopRange { s: usize, l: usize },
    #[error("squeeze ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("channel count must be positive")]
    InvalidChannels,
    #[error("no weight for pair ({0}, {1}) with nonzero graph entry")]
    MissingPairWeight(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Errors raised while building, running, saving or loading models.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint shape conflict: {0}")]
    ShapeConflict(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Errors raised by the pose dataset loaders and the synthetic generator.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: expected {expected} joints, found {found}")]
    JointCountMismatch { line: usize, expected: usize, found: usize },
    #[error("image size must be positive, got {0}x{1}")]
    InvalidImageSize(f64, f64),
    #[error("invalid synthetic rig: {0}")]
    InvalidSpec(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised by the evaluation metrics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("pose shapes differ: {0} vs {1} joints")]
    ShapeMismatch(usize, usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("no samples to evaluate")]
    Empty,
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("sample is missing 3D ground truth")]
    MissingTarget,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}
