//! Differentiable graph matching for multi-object tracking data association.
//!
//! Detections of the current frame and live tracklets each form a complete
//! directed graph. Matching the two graphs is a quadratic assignment problem,
//! relaxed here to a convex QP whose solution is differentiable through its
//! KKT system. At inference time the gated search tree ([`gst`]) replaces the
//! QP with an exact per-component enumeration.
//!
//! Module map:
//!
//! - [`graphkit`]: detections, tracklets, view graphs and feature normalization
//! - [`affinity`]: vertex affinity `B`, edge affinity `M_e`, quadratic affinity `M`
//! - [`qpsolve`]: QP assembly, primal-dual interior point solver, KKT residuals
//! - [`diffmatch`]: differentiable matching layer, temperature softmax, loss
//! - [`gcn`]: cross-graph GCN feature enhancement, training step, checkpoints
//! - [`gst`]: gate graph, connected components, per-component search, Hungarian
//! - [`tracker`]: Kalman motion model, constraint filtering, online tracker

pub mod affinity;
pub mod diffmatch;
pub mod gcn;
pub mod graphkit;
pub mod gst;
pub mod qpsolve;
pub mod sparse;
pub mod tracker;

mod error;

pub use error::{Error, Result};

/// Canonical detection-major pair index `p(i, j) = i * n_t + j`.
#[inline]
pub fn pair_index(i: usize, j: usize, n_t: usize) -> usize {
    i * n_t + j
}
