use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("CFL condition violated: |u|*dt/dx = {courant:.6} > 1")]
    Cfl { courant: f64 },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point (x = {x}, t = {t}) lies outside the space-time domain")]
    OutsideDomain { x: f64, t: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// P = R + C_eps could not be factored.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// 1 - (R P^-1)_kk vanished, the datum is interpolated exactly.
    #[error("vanishing cross-validation denominator at datum {index}")]
    InterpolatingDatum { index: usize },

    #[error("non-finite penalty at sigma_f2 = {sigma_f2}")]
    NonFinitePenalty { sigma_f2: f64 },

    #[error("observation filter accepted {accepted} of {required} draws after {attempts} attempts")]
    FilterExhausted {
        accepted: usize,
        required: usize,
        attempts: usize,
    },

    #[error("dense problem of size {size} exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
