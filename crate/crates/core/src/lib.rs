//! Curriculum learning for occluded-image classification.
//!
//! Training data is ordered by occlusion level and presented in nested
//! stages. Three schedule-shaping signals are available on top of the plain
//! cross-entropy objective:
//!
//! - Wasserstein-1 distance between occlusion histograms of consecutive
//!   stages ([`transport`]),
//! - mutual information between true and predicted labels, used to pick the
//!   occlusion level of each stage ([`infotheory`]),
//! - geodesic length between consecutive model snapshots under a
//!   loss-induced metric ([`geometry`]).
//!
//! A small dense network with hand-written backpropagation lives in
//! [`trainer`], so every term is computed end to end without external ML
//! dependencies.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod curriculum;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod infotheory;
pub mod metrics;
pub mod occlusion;
pub mod tensor;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
