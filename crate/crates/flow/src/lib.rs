//! Self-supervised dual-frame particle flow estimation.
//!
//! The pipeline, from two unordered particle frames to a per-particle flow:
//!
//! 1. [`features`]: graph features for every particle of both frames.
//! 2. [`transport`]: cosine similarity, unbalanced entropic transport, top-L
//!    soft targets, confidences and the initial flow.
//! 3. [`losses`]: reconstruction, smoothness and zero-divergence terms used
//!    to train the feature network without labels ([`trainer`]).
//! 4. [`dve`]: per-sample residual refinement at test time.
//!
//! [`metrics`] scores a flow against ground truth, and [`synth`] produces
//! analytic flow cases with known ground truth.

mod error;

pub mod dve;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod transport;

pub use error::{FlowError, Result};
