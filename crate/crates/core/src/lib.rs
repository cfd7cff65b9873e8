pub mod backbone;
pub mod calibration;
pub mod checkpoint;
pub mod classifier;
pub mod datasets;
pub mod error;
pub mod exec;
pub mod lock;
pub mod metrics;
pub mod nn;
pub mod refinement;
pub mod saliency;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
