//! Tensors with reverse-mode autodiff, B-spline activations, CNN/ConvKAN/GCN
//! models, superpixel graphs, validation protocols and comparison statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bspline;
pub mod error;
pub mod gradcheck;
pub mod graphs;
pub mod layers;
pub mod preprocess;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
