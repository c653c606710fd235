use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "occluder sphere would engulf foreground sphere (ray needs radius {needed} >= {outer})"
    )]
    InnerSphereEngulfs { needed: f64, outer: f64 },

    #[error("point inside inner sphere (|x| = {norm}, r = {radius})")]
    InsideInnerSphere { norm: f64, radius: f64 },

    #[error("point inside outer sphere (|x| = {norm}, R = {radius})")]
    InsideOuterSphere { norm: f64, radius: f64 },

    #[error("ray has no positive intersection with the inner sphere")]
    NoInnerSphereHit,

    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("near-singular skinning blend (condition estimate {0:e})")]
    SingularBlend(f64),

    #[error("backward requires a scalar root, got a {rows}x{cols} node")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("numeric failure at step {step}: {detail}")]
    NumericAbort { step: usize, detail: String },

    #[error("no latent code for frame {0}")]
    MissingLatent(usize),

    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("frame count mismatch: expected {expected}, found {found} in {what}")]
    FrameCountMismatch {
        expected: usize,
        found: usize,
        what: String,
    },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
