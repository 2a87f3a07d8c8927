// Negated float comparisons such as `!(x > 0.0)` are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod compute;
pub mod config;
pub mod dataio;
pub mod decomposer;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod normalization;
pub mod params;
pub mod patcher;
pub mod reprogrammer;
pub mod trainer;

pub use error::{Error, Result};
