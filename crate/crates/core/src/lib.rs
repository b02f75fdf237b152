// NaN must fail validation, so bounds are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod morphable;
pub mod nn;
mod par;
pub mod render;
pub mod train;

pub use error::{Error, Result};
