// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cda;
pub mod cli;
pub mod data;
pub mod error;
pub mod mda;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
