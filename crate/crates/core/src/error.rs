use thiserror::Error;

use crate::numeric::NumericError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("token dimension mismatch: prompt has {prompt}, classname has {classname}")]
    DimMismatch { prompt: usize, classname: usize },
    #[error("sequence of {len} tokens exceeds the positional table ({max} positions)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("q must lie in (0, 1], got {0}")]
    InvalidQ(f64),
    #[error("probability {prob:e} of class {class} is degenerate")]
    DegenerateProbability { class: usize, prob: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid method combination: {0}")]
    InvalidCombination(String),
    #[error("invalid value for `{field}`: {constraint}")]
    InvalidValue { field: String, constraint: String },
    #[error("probe needs at least one noisy sample")]
    NoNoisySamples,
    #[error("probe needs at least one clean sample")]
    NoCleanSamples,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}
