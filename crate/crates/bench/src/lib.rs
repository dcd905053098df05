//! File formats, synthetic scenarios, metrics, toy training and timing
//! harness around the `gmtrack` core.

pub mod error;
pub mod features;
pub mod gstbench;
pub mod kv;
pub mod metrics;
pub mod mot;
pub mod scenario;
pub mod toy;

pub use error::{BenchError, Result};
