use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("masked softmax row {row} has no valid position")]
    AllMaskedRow { row: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("fit error: feature `{feature}` has no observed values in the fit split")]
    Fit { feature: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("region {0} has no voxels")]
    RegionEmpty(u16),
    #[error("feature undefined: {0}")]
    FeatureUndefined(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("exact Shapley enumeration supports at most {max} features, got {n}; use permutation sampling")]
    Arity { n: usize, max: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error class, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numeric(_) | Error::AllMaskedRow { .. } | Error::Domain(_) => ErrorClass::Numeric,
            Error::Config(_) | Error::Arity { .. } => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::AllMaskedRow { .. } => "AllMaskedRow",
            Error::Numeric(_) => "NumericError",
            Error::Schema(_) => "SchemaError",
            Error::Fit { .. } => "FitError",
            Error::Split(_) => "SplitError",
            Error::Config(_) => "ConfigError",
            Error::Domain(_) => "DomainError",
            Error::RegionEmpty(_) => "RegionEmpty",
            Error::FeatureUndefined(_) => "FeatureUndefined",
            Error::Metrics(_) => "MetricsError",
            Error::Arity { .. } => "ArityError",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
