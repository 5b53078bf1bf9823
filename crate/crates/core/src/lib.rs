//! Federated low-rank gradient descent laboratory.
//!
//! Simulates FedLRGD and a federated-averaging baseline on partitioned
//! datasets, accounts running time through federated oracle complexity, and
//! checks the supporting approximation and timing bounds numerically.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod complexity;
pub mod covering;
pub mod error;
pub mod fedave;
pub mod fedlrgd;
pub mod numerics;
pub mod problem;
pub mod rank_probe;
pub mod record;
pub mod rng;

pub use error::{FedError, Result};
