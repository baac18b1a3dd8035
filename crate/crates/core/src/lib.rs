//! Marker-less RGB-D target localization and geometric grasp planning.
//!
//! Segmented color + depth frames become a cleaned object point cloud
//! ([`cloud`]), from which [`graspplan`] derives a centroid, principal axis
//! and a slab of contact candidates. [`transport`] moves frame pairs over a
//! request-reply wire protocol with hybrid JPEG/PNG compression, and
//! [`simulator`] renders synthetic scenes with exact ground truth for
//! evaluating the whole [`pipeline`].

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod cloud;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod graspplan;
pub mod imaging;
pub mod pipeline;
pub mod segmentation;
pub mod simulator;
pub mod transport;

pub use error::{Error, Result};
pub use exec::Execution;
