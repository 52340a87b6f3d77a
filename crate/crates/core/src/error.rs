//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operation received incompatible extents. The detail string
    /// names the offending dimension.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Input extents are not divisible by the block size but are large
    /// enough to sample after cropping.
    #[error(
        "input {height}x{width} is not divisible by block size {block_size}; \
         crop to {}x{} first (see validate_input_size)",
        height / block_size * block_size,
        width / block_size * block_size
    )]
    InputNotDivisible {
        height: usize,
        width: usize,
        block_size: usize,
    },

    /// An input extent is smaller than one sampling block, so no
    /// measurement can be produced at all.
    #[error("input {height}x{width} has an extent smaller than block size {block_size}: no output can be obtained")]
    InputTooSmall {
        height: usize,
        width: usize,
        block_size: usize,
    },

    #[error("parameter `{name}` has no gradient; run backward before stepping the optimizer")]
    MissingGradient { name: String },

    #[error("backward was already run on this graph; rebuild the forward pass before calling it again")]
    BackwardConsumed,

    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },

    /// A weight handed to the packed encoder is not exactly in
    /// {-alpha, 0, +alpha}.
    #[error("weight at flat index {index} is {value}, not in {{-{alpha}, 0, +{alpha}}}")]
    Quantization {
        index: usize,
        value: f64,
        alpha: f64,
    },

    /// A serialized artifact violates its declared format.
    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: u32, detail: String },

    /// The auxiliary-sampler fit made things worse for too long.
    #[error("auxiliary fit diverged: objective increased over {count} consecutive evaluations")]
    AuxiliaryDivergence { count: u32 },

    #[error(
        "measurement rate mismatch: checkpoint was trained at mr = {checkpoint_mr}, \
         requested mr = {requested_mr}; use a checkpoint trained at the requested rate"
    )]
    MrMismatch {
        checkpoint_mr: f64,
        requested_mr: f64,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
