use thiserror::Error;

pub type Result<T> = std::result::Result<T, VndError>;

#[derive(Debug, Error)]
pub enum VndError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("KL divergence is infinite: posterior mass {beta} on mask v_{index} which has zero prior probability")]
    InfiniteKl { index: usize, beta: f64 },

    #[error("enumeration over {0} masks exceeds the brute-force limit")]
    TooLarge(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit did not converge: max deviation {max_deviation:.4} exceeds {limit}")]
    FitFailed { max_deviation: f64, limit: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
