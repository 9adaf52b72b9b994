//! Sliding-window convolutional body-part detectors with a non-parametric
//! spatial model.
//!
//! The pipeline has two stages: per-part binary convnets applied as sliding
//! windows over an image pyramid produce per-joint response maps, and a
//! chain-structured spatial model filters those maps with learned pairwise
//! offset priors to suppress anatomically inconsistent peaks. Training data
//! is brought to a canonical 320x240 frame anchored at the shoulder
//! midpoint; evaluation reports the fraction of joints within a pixel
//! radius of ground truth.

pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod net;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{ImagePlane, KernelStack, Scalar};

/// The pipeline's scalar type. All numerics run in double precision.
pub type Pixel = f64;

/// Concrete image/feature/response plane used throughout the pipeline.
pub type Image = ImagePlane<Pixel>;

/// Concrete filter bank used by the detector networks.
pub type Kernels = KernelStack<Pixel>;
