//! Label-style conditioned segmentation with calibrated uncertainty.

pub mod backbone;
pub mod checkpoint;
pub mod curation;
pub mod dataset_io;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod prob_unet;
pub mod ssn;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
