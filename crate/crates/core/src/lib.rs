// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod codebook;
pub mod data_io;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod metrics_stats;
pub mod networks;
pub mod projector;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
