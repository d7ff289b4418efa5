use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value {value} is outside the representable range of {format}")]
    OutOfRange { value: f64, format: String },

    /// A checked add would have left the register range. `raw` is the
    /// would-be raw value, `coord` the register coordinate when known.
    #[error("fixed-point overflow: raw value {raw} does not fit {format}{}", coord_suffix(.coord))]
    Overflow {
        raw: i128,
        format: String,
        coord: Option<RegisterCoord>,
    },

    #[error("format mismatch: {left} vs {right}")]
    FormatMismatch { left: String, right: String },

    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid bound: {0}")]
    InvalidBound(String),

    #[error("normalizer {normalizer} below floor {floor}")]
    DegenerateNormalizer { normalizer: f64, floor: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("rule {rule} has no groundings")]
    NoGroundings { rule: u32 },

    #[error("budget exceeded: {required_bits} bits required, {budget_bits} available")]
    BudgetExceeded { required_bits: u64, budget_bits: u64 },

    #[error("budget violation: {0}")]
    BudgetViolation(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("flow {flow:016x}: {source}")]
    Flow { flow: u64, source: Box<Error> },
}

/// Which accumulator register an overflow hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RegisterCoord {
    S { row: usize, col: usize },
    Z { row: usize },
    Vector { index: usize },
}

fn coord_suffix(coord: &Option<RegisterCoord>) -> String {
    match coord {
        Some(RegisterCoord::S { row, col }) => format!(" at S[{row}][{col}]"),
        Some(RegisterCoord::Z { row }) => format!(" at Z[{row}]"),
        Some(RegisterCoord::Vector { index }) => format!(" at lane {index}"),
        None => String::new(),
    }
}

impl Error {
    pub fn is_overflow(&self) -> bool {
        match self {
            Error::Overflow { .. } => true,
            Error::Flow { source, .. } => source.is_overflow(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
