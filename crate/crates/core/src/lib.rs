//! Multi-environment topic model.
//!
//! Global topic-word weights are shared by every document while each
//! environment carries a sparse additive deviation per topic. Training is
//! amortized mean-field variational inference with reparameterized gradients.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifact;
pub mod causal;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
