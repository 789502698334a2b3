use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the model is defined.
    #[error("domain error in {what}: {reason}")]
    Domain { what: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("calibration failed: target yield {target} not bracketed by lambda in [{lo}, {hi}] (yield {yield_lo:.4} .. {yield_hi:.4})")]
    CalibrationFailed {
        target: f64,
        lo: f64,
        hi: f64,
        yield_lo: f64,
        yield_hi: f64,
    },

    #[error("no taper efficiency tabulated for {0} nm")]
    UnknownWavelength(f64),

    #[error("no peak above 5 sigma of background (peak excess {excess:.1}, threshold {threshold:.1})")]
    NoPeak { excess: f64, threshold: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            what,
            reason: reason.into(),
        }
    }
}
