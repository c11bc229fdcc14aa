#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod baselines;
pub mod channel;
mod codec;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod linear;
pub mod neural;
pub mod pilots;
pub mod rng;

pub use error::{Error, FormatError, Result};
