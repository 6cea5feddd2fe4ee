//! Hyperbolic cross-modal feature transfer on sparse voxel grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`hyperball`]: Poincaré-ball clipping, Möbius addition, log map at the
//!   origin and the tangent-space distillation loss.
//! - [`voxgrid`]: sparse voxel grids, pinhole projection and the
//!   mask-guided foreground densification / background pooling pipeline.
//! - [`fusion`]: small MLPs with hand-written reverse passes, bilinear
//!   image-feature gathering and gated 2D/3D fusion.
//! - [`fago`]: box labelling, focal importance loss, top-K filtering,
//!   centre-vote and triplet clustering losses, residual merge.
//! - [`objective`]: weighted loss combination, run configuration and the
//!   central-difference gradient checker.
//! - [`scenegen`]: seeded synthetic scenes (boxes, points, camera, mask,
//!   feature map).
//! - [`pipeline`]: the end-to-end forward/backward pass tying it together.
//!
//! Everything is `f64`; reductions run in a fixed index order so results
//! do not depend on the rayon thread count.

pub mod error;
pub mod fago;
pub mod features;
pub mod fusion;
pub mod hyperball;
pub mod objective;
pub mod pipeline;
pub mod scenegen;
pub mod voxgrid;

pub use error::{Error, Result};
pub use features::FeatureRows;
