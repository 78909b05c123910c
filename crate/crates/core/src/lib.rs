//! Streaming fully test-time adaptation.
//!
//! A small normalized classifier is pretrained on source data and then
//! adapted online, batch by batch, on a shifted and possibly
//! label-imbalanced test stream by minimizing prediction entropy over the
//! normalization layers' scale and shift. Four optional tricks compose
//! around that loop: batch renormalization, class rebalancing with a
//! single-sample weight buffer, entropy-threshold sample selection and
//! temperature scaling.

// Validation uses `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod par;
pub mod report;
pub mod stream;

pub use error::{Error, Result};
