// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filter;
pub mod influence;
pub mod model;
pub mod trainer;
pub mod unlearn;

pub use error::{Error, Result};
