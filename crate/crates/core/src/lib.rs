//! Open-set video moment retrieval over precomputed features.
//!
//! A normalizing flow models the density of in-distribution sentence
//! features; a percentile boundary on its log-likelihood rejects
//! out-of-distribution queries. Accepted queries are grounded in the video by
//! a cross-modal head trained with positive-unlabeled proposal learning.

pub mod checkpoint;
pub mod crossmodal;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ood_boundary;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};
