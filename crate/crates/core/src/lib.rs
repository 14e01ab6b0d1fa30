//! Synthetic multi-receiver I/Q datasets, windowed classifier inputs, the
//! Hyper-CNN search space and Hyperband search over it.

pub mod error;
pub mod harness;
pub mod hyperband;
pub mod hyperspace;
pub mod preprocess;
pub mod signal;

pub use error::{CoreError, Result};
