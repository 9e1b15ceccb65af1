use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix argument contains NaN or infinite entries.
    #[error("matrix contains non-finite entries")]
    InvalidMatrix,

    /// An iterative numerical routine (e.g. SVD) failed to converge.
    #[error("numerical routine failed to converge")]
    NumericalFailure,

    /// A rank-k object was requested from data that only supports a smaller rank.
    #[error("requested rank {requested} exceeds admissible rank {admissible}")]
    RankDeficient { requested: usize, admissible: usize },

    /// Operand dimensions are incompatible.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A token id falls outside the model vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: usize, vocab: usize },

    /// A layer index falls outside the model depth.
    #[error("layer index {layer} out of range for model with {layers} layers")]
    InvalidLayer { layer: usize, layers: usize },

    /// A generator specification is internally inconsistent.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A generated corpus failed its planted-bias quality checks.
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    /// A container file is malformed, truncated, or fails its checksum.
    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    /// A required named entry is absent from a container.
    #[error("missing container entry: {0}")]
    MissingEntry(String),

    /// An argument is invalid in a way not covered by a more specific variant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A vector that must be normalized has (near-)zero norm.
    #[error("cannot normalize zero vector at row {0}")]
    DegenerateVector(usize),

    /// A pipeline stage failed; carries the layer it was processing.
    #[error("pipeline failed at layer {layer}: {source}")]
    PipelineStage {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    /// An underlying I/O operation failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
