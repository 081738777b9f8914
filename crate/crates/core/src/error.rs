use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate projection for point {index}: |z'| = {depth:e} is below 1e-9")]
    DegenerateProjection { index: usize, depth: f64 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("feature sample out of bounds at offset ({dx}, {dy})")]
    OutOfBounds { dx: i64, dy: i64 },

    #[error("channel mismatch: kernel has {kernel} channels, feature map has {map}")]
    ChannelMismatch { kernel: usize, map: usize },

    #[error("degenerate heatmap: normalizer {0:e} below 1e-12")]
    DegenerateHeatmap(f64),

    #[error("rank deficient system: smallest/largest singular value ratio {0:e}")]
    RankDeficient(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("correspondence mismatch: {source_len} source vs {target_len} target points")]
    CorrespondenceMismatch { source_len: usize, target_len: usize },

    #[error("degenerate shape: {0}")]
    DegenerateShape(String),

    #[error("no voxel exceeds the support threshold {0}")]
    EmptySupport(f64),

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("non-finite loss at stage {stage}, epoch {epoch}, sample {sample}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        sample: usize,
    },

    #[error("{0} gradient check suites failed")]
    GradientMismatch(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateProjection { .. }
                | Error::DegenerateHeatmap(_)
                | Error::RankDeficient(_)
                | Error::DegenerateShape(_)
                | Error::RegistrationFailed(_)
                | Error::NonFiniteLoss { .. }
                | Error::OutOfBounds { .. }
                | Error::GradientMismatch(_)
        )
    }
}
