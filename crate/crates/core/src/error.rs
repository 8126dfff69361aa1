use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("linkage error: {0}")]
    Linkage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate mask for `{0}`: mask must contain both foreground and background")]
    DegenerateMask(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("aggregator failed on resample {index}: {source}")]
    Resample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad classes used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Index(_) | Error::Unsupported(_) | Error::Linkage(_) | Error::Stratification(_) => {
                ErrorClass::Validation
            }
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Resample { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
