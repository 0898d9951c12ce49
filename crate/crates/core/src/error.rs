use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("batch normalization in train mode needs at least 2 samples")]
    BatchTooSmall,
    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("graph node {node} references a later node {input}")]
    Cycle { node: usize, input: usize },
    #[error("label is not one-hot")]
    NotOneHot,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid network spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("branch {0} already exists")]
    DuplicateBranch(String),
    #[error("unknown brand {0}")]
    UnknownBrand(String),
    #[error("image {height}x{width} is smaller than one {size}x{size} tile")]
    ImageTooSmall { width: usize, height: usize, size: usize },
    #[error("patch count must be at least 1")]
    ZeroPatchCount,
    #[error("hierarchy level {level} has no members{}", at.as_ref().map(|a| alloc::format!(" under {a}")).unwrap_or_default())]
    EmptyLevel { level: &'static str, at: Option<String> },
    #[error("quota budget k must be at least 1")]
    ZeroBudget,
    #[error("image {0} is missing from the patch cache")]
    MissingFromCache(String),
    #[error("duplicate image record {0}")]
    DuplicateRecord(String),
    #[error("model {0} has fewer than two devices")]
    SingleDeviceModel(String),
    #[error("invalid fold configuration: {0}")]
    InvalidFolds(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training diverged at step {step}")]
    Divergence { step: usize, source: alloc::boxed::Box<Error> },
    #[error("missing fold {0}")]
    MissingFold(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("test device leaked into training stream: {0}")]
    Leakage(String),
}
