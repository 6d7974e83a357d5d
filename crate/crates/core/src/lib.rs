//! Training-free acceleration primitives for two-stage 3D diffusion pipelines.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`stepcache`]: stride-k step caching for the sparse-structure stage, with
//!   first-order extrapolation for shape tokens and momentum-anchored smoothing
//!   for layout tokens.
//! - [`carve`]: saliency-driven top-K token carving plus curvature-gated tangent
//!   reuse with an accumulated error budget for the latent-refinement stage.
//! - [`spectralagg`]: high-frequency energy ratios of the silhouette mask and
//!   coarse voxel grid, the adaptive downsampling factor, and max-pool bin
//!   aggregation of decoder tokens.
//! - [`sim`]: a synthetic backbone with closed-form ground truth and the
//!   full-compute oracle every accelerated run is compared against.
//! - [`numerics`]: FFT kernels (radix-2 and Bluestein) and a naive DFT.
//! - [`pipeline`]: stage runners paired with their oracles and the chained
//!   end-to-end run.
//! - [`cvxg`]: the on-disk voxel/mask grid format.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod carve;
pub mod cvxg;
pub mod error;
pub mod fixtures;
pub mod numerics;
pub mod pipeline;
pub mod sim;
pub mod spectralagg;
pub mod stepcache;
pub mod trajectory;

pub use backbone::{Backbone, Geometry, TokenMatrix};
pub use error::{Error, Result};
pub use numerics::{ComplexGrid, Direction, RealGrid};
pub use trajectory::{RunMetrics, StepDecision, TrajectoryRecord};
