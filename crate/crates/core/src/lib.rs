// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod basis;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod gmm;
pub mod linalg;
pub mod report;
pub mod score;
pub mod simulation;

pub use error::{NsiError, Result};
