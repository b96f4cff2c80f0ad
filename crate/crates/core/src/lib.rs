//! Crop-then-segment instance segmentation laboratory.
//!
//! The crate bundles a small reverse-mode differentiation engine, the layers
//! and mask-head architectures built on it, a differentiable RoIAlign crop,
//! a synthetic partially supervised dataset, evaluation metrics and the
//! training recipes that compare mask heads on seen and unseen categories.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod mask;
pub mod model;
pub mod nn;
pub mod roi;
pub mod tensor;
pub mod train;

pub use autodiff::{ConvOptions, GatherPlan, Graph, Padding, Var};
pub use error::{Error, Result};
pub use mask::{BBox, BinaryMask};
pub use tensor::{Real, Tensor};
