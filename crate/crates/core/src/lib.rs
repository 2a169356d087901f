//! Differential testing of a full-precision classifier against its int8
//! post-training-quantized counterpart.
//!
//! Candidate inputs are produced by decoding flat transformation vectors into
//! compound distortions of 3D hyperspectral patches. A population-based search
//! (PSO, GA or a random-sampling baseline) maximizes either a softmax
//! divergence or a neuron-coverage dissimilarity between the two models, and
//! every valid distorted patch on which the models disagree is recorded as a
//! difference-inducing input (DII).

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distortion;
pub mod error;
pub mod fitness;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod quant;
pub mod search;
pub mod toy;

mod codec;

pub use error::{Error, Result};
pub use patch::{Dims, Patch3D, PatchSet};
