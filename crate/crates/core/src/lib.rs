//! Two-party private transformer inference: a semantic additive HE backend,
//! garbled-circuit nonlinear functions, offline/online sharing protocols and
//! a fixed-point reference model they must agree with bit for bit.

pub mod circuit;
pub mod error;
pub mod he;
pub mod model;
pub mod packing;
pub mod protocol;
pub mod ring;
pub mod sharing;

pub use error::{Error, Result};
pub use ring::{FixedTensor, RingParams};
