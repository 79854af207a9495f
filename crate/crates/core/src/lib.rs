//! Model merging with layer-wise magnitude calibration.
//!
//! The crate merges fine-tuned checkpoints that share one pretrained base
//! and then rescales the merged model layer by layer so that the size of
//! each layer's contribution matches that of the specialised models, either
//! on the weights (data-free), on the features (from a few unlabelled
//! samples), or both.

pub mod bench;
pub mod calibrate;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod merge;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
