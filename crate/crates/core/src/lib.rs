//! Detection of paired regions of interest in bilateral grayscale images.
//!
//! The crate matches a single reference template against the two halves of a
//! bilateral image by minimizing a normalized cross-correlation energy over a
//! constrained affine pose family. Patches are extracted with a differentiable
//! bilinear sampler, so the energy can be minimized by gradient descent from a
//! grid of starting points, refined from the prediction of a small learned
//! localization network, or compared against a classical sliding-window
//! matcher.
//!
//! # Coordinates
//! Every image is addressed in normalized coordinates `(x, y) ∈ [-1, 1]²`
//! where `x` is horizontal, `y` is vertical, `(-1, -1)` is the center of the
//! top-left pixel and `(1, 1)` the center of the bottom-right pixel. Samples
//! outside the image read zeros.
//!
//! # Modules
//! - [`image`]: raster type, sampler, warps and their pose Jacobian.
//! - [`param`]: the tanh map from unconstrained vectors to poses.
//! - [`loss`]: the matching energy and its gradient.
//! - [`preprocess`]: bilateral split, padding, resizing and flipping.
//! - [`optimize`]: Adam, trace-minimum refinement and the multi-start grid search.
//! - [`baseline`]: fast sliding-window NCC over a scale pyramid.
//! - [`neural`]: the Siamese localization network and its training loops.
//! - [`synth`]: synthetic bilateral data with planted poses.

pub mod baseline;
pub mod config;
pub mod detection;
mod error;
pub mod image;
pub mod io;
pub mod loss;
pub mod neural;
pub mod optimize;
pub mod param;
pub mod preprocess;
pub mod synth;


pub use crate::config::Config;
pub use crate::detection::{Detection, DetectionStats, Method, SideDetection};
pub use crate::error::{Error, Result};
pub use crate::image::{Image, NormCoord, WarpJacobian};
pub use crate::loss::{LossBreakdown, SubWindow, Template};
pub use crate::param::{AffineMatrix, ParamConfig, PoseParams, UnconstrainedParams};
