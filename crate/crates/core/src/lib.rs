//! Graph wavelet convolutional networks for single- and multi-modal
//! semi-supervised node classification.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
