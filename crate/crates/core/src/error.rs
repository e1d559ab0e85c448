use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("filter {0} has constant raw weights (zero centered norm)")]
    DegenerateFilter(usize),

    #[error("group weights sum to zero")]
    DegenerateWeights,

    #[error("reconstruction equals target exactly; PSNR is infinite")]
    DegenerateLoss,

    #[error("bad argument: {0}")]
    BadArgument(String),

    #[error("tape does not match the network: {0}")]
    TapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("stage {stage} left its constraint set: ‖x − y‖/ε = {ratio}")]
    Infeasible { stage: usize, ratio: f64 },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint variant mismatch: expected {expected}, found {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("image {width}x{height} is smaller than crop size {crop}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        crop: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
