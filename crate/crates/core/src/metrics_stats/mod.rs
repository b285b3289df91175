//! Image-quality metrics and reader-study statistics.

mod metrics;
mod stats;

pub use metrics::*;
pub use stats::*;
