use thiserror::Error;

/// Errors raised anywhere in the protocol stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid ring parameters: {0}")]
    RingParams(String),

    #[error("value {value} does not fit the fixed-point range (|x| < {bound})")]
    Overflow { value: f64, bound: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ciphertext key {found} does not match key {expected}")]
    KeyMismatch { expected: u64, found: u64 },

    #[error("slot vector of length {len} exceeds {slots} slots")]
    Oversize { len: usize, slots: usize },

    #[error("rotation {0} out of range")]
    Rotation(usize),

    #[error("noise budget exhausted ({used} > {budget})")]
    NoiseBudget { used: u64, budget: u64 },

    #[error("invalid HE parameters: {0}")]
    HeParams(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("offline material {0} missing")]
    MissingMaterial(String),

    #[error("offline material {0} already consumed")]
    MaterialReuse(u64),

    #[error("range violation in secure {0}")]
    RangeViolation(String),

    #[error("garbled circuit output failed to decode at output {0}")]
    DecodeFailure(usize),

    #[error("malformed circuit: {0}")]
    Circuit(String),

    #[error("invalid one-hot input: {0}")]
    OneHot(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("server-ignorance audit failed: {0}")]
    Audit(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
