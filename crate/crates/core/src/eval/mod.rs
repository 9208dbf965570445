//! Accuracy metrics, experiment studies and the hybrid solver-to-network run.

mod hybrid;
mod metrics;
mod studies;

pub use hybrid::*;
pub use metrics::*;
pub use studies::*;
