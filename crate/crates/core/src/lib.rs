//! Skeleton-based surgical gesture recognition.
//!
//! Surgical-tool joint poses are cut into 90-frame windows, arranged on a
//! spatial-temporal graph of the tool skeleton, and classified by a stack of
//! spatial-temporal graph convolution units trained with step-decayed SGD.
//! Evaluation is leave-one-user-out cross-validation.

pub mod augment;
pub mod datapipe;
pub mod error;
pub mod evalharness;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
