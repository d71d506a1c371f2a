//! Cross-spectral (RGB/LWIR) stereo disparity estimation on human subjects.
//!
//! The matcher is a dual-branch patch network: two convolutional trunks that
//! do not share weights digest 36x36 4-channel patches (color or replicated
//! thermal plus a binary person mask), their 256-D features are fused twice
//! (elementwise product and concatenation), and two small fully-connected
//! heads classify each fusion as match / non-match. Disparity at a point is
//! the average of the two heads' argmax over a candidate window sweep.
//!
//! Crate layout:
//! - [`tensor`]: dense tensors, layer math, finite-difference verification
//! - [`model`]: the two-trunk / two-head network and its checkpoint format
//! - [`patch`]: 4-channel composition, patch extraction, augmentation
//! - [`dataset`]: on-disk formats (PNG frames, ground-truth CSV, fold JSON)
//! - [`synth`]: synthetic multispectral scene generator with dense ground truth
//! - [`train`]: dual cross-entropy objective and the optimizer loop
//! - [`disparity`]: candidate sweep, per-branch argmax, averaged estimate
//! - [`baseline`]: classical SSD window matcher
//! - [`eval`]: recall@n metric, folds, report aggregation
//! - [`estimator`]: common estimator trait and the by-name registry

pub mod baseline;
pub mod dataset;
pub mod disparity;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod model;
pub mod patch;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{LayerSpec, Scalar, Tensor};
