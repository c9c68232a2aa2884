//! Super-resolution ultrasound localization.
//!
//! The pipeline simulates microbubble flow in tissue ([`fieldsim`]), removes
//! static clutter with block-wise SVD ([`clutterfilt`]), detects and
//! sub-pixel-classifies microbubbles with a fully convolutional
//! inverted-bottleneck network ([`network`], [`training`]), accumulates the
//! detections on a K-fold finer grid ([`srusform`]) and scores the result
//! against ground truth ([`evalkit`]).

pub mod clutterfilt;
pub mod error;
pub mod evalkit;
pub mod fieldsim;
pub mod formats;
pub mod network;
pub mod registry;
pub mod srusform;
pub mod stack;
pub mod training;

pub use error::{Result, SrusError};
pub use fieldsim::GridSpec;
pub use stack::IqFrameStack;
