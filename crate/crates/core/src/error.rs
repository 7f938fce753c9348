use thiserror::Error;

#[derive(Debug, Error)]
pub enum UsatError {
    #[error("patch counts are not nested: {0}")]
    Divisibility(String),
    #[error("ground cover mismatch: {0}")]
    Coverage(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("footprint error: {0}")]
    Footprint(String),
    #[error("empty band subset")]
    EmptySubset,
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("encoding allocation error: {0}")]
    Allocation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown band: {0}")]
    UnknownBand(String),
    #[error("empty spectral group")]
    EmptyGroup,
    #[error("invalid mask ratio {0}")]
    Ratio(f64),
    #[error("no token is masked in any group")]
    AllVisible,
    #[error("value out of range: {0}")]
    Range(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("no positive labels")]
    NoPositives,
    #[error("crop window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("crop window not aligned to pixel edges: {0}")]
    Alignment(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UsatError>;
