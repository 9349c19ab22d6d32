//! Drop-in depthwise-convolution replacements for Vision Transformer
//! attention heads.
//!
//! * [`vit`]: the exact multi-head self-attention forward path.
//! * [`dropin`]: convolutional replacements, hybrid models and kernel fitting.
//! * [`select`]: variance scoring, property checks, selection plans and gating.
//! * [`cost`]: closed-form FLOP/parameter accounting and a timing harness.
//! * [`archive`]: the on-disk model format.

pub mod archive;
pub mod cost;
pub mod dropin;
pub mod error;
pub mod lstsq;
pub mod select;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
