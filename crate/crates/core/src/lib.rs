// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod env;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod normalization;
pub mod oracle;
pub mod power_flow;
pub mod quadric;
pub mod reward;
pub mod seeding;
pub mod td3;

pub use error::{Error, Result};
pub use nalgebra;
