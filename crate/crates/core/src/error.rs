use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rectangle ({x0}, {y0}, {x1}, {y1})")]
    InvalidRect { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("invalid image extent {width}x{height}")]
    InvalidImage { width: u32, height: u32 },

    #[error("invalid activation window: {0}")]
    InvalidWindow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("map is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("map has no probability mass")]
    ZeroMass,

    #[error("point ({x}, {y}) lies outside the activation window")]
    OutsideWindow { x: f64, y: f64 },

    #[error("instance has no labeled keypoints")]
    NoLabeledKeypoints,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("crop sampling failed after {retries} retries")]
    CropSampling { retries: usize },

    #[error("fit diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64, trace: Vec<f64> },

    #[error("image {image_id}: {source}")]
    Image { image_id: u64, source: Box<Error> },

    #[error(transparent)]
    Interop(#[from] crate::interop::InteropError),
}
