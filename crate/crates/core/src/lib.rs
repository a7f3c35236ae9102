//! Convolutional Hough matching.
//!
//! Dense semantic correspondence by learnable local Hough voting: a
//! multi-scale correlation volume is filtered with parameter-shared 6D and
//! 4D convolutions, turned into a dense flow with a kernel soft-argmax, and
//! sampled at keypoints.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: row-major dense arrays, bilinear pair resizing, max-reduction.
//! - [`kernel`]: `full` / `iso` / `psi` weight sharing and kernel dumps.
//! - [`convnd`]: N-dimensional convolution (reference and folded fast path).
//! - [`correlation`]: patch features, scale pyramid, 6D correlation assembly.
//! - [`chm`]: CHM layers, the matching head, and the global-voting baseline.
//! - [`flow`]: kernel soft-argmax flow and soft keypoint sampling.
//! - [`learn`]: reverse-mode gradients, Adam, synthetic pairs, training.
//! - [`model`]: the assembled pipeline, its configuration and checkpoints.
//! - [`eval`]: PCK, precision-recall, scale-vote histograms.

pub mod error;
pub mod tensor;
pub mod kernel;
pub mod convnd;
pub mod image;
pub mod correlation;
pub mod chm;
pub mod flow;
pub mod learn;
pub mod model;
pub mod eval;

pub use error::{ChmError, Result};
pub use tensor::DenseTensor;
