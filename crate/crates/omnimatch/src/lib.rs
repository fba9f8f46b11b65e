//! Dense feature matching and two-view relative pose estimation for
//! equirectangular (ERP) omnidirectional image pairs.
//!
//! The pipeline stays on the unit sphere end to end: pixels map to viewing
//! rays, matches are dense fields of rays in the other camera, match
//! residuals are great-circle angles, and pose estimation solves the
//! spherical epipolar constraint directly on bearing vectors. Descriptor
//! extraction and match scoring are pluggable; the built-in implementations
//! are deterministic analytic baselines that exercise the same contracts a
//! learned frontend would.
//!
//! Modules, roughly bottom-up:
//! - [`sphere`]: coordinate conventions and conversions.
//! - [`raster`]: dense grids and seam-aware bilinear sampling.
//! - [`frame`]: images, depth, poses, warping, co-visibility, augmentation.
//! - [`io`]: PNG / PFM / pose / pair-list / PLY file formats.
//! - [`synth`]: analytic raycast scenes for ground-truth pairs.
//! - [`pyramid`]: multi-scale descriptor extraction.
//! - [`matcher`]: kernelized global matching on the coarse grids.
//! - [`refine`]: coarse-to-fine geodesic refinement of match fields.
//! - [`loss`]: angular training objectives and gradient checking.
//! - [`pose`]: spherical eight-point solver, RANSAC, refinement, metrics.
//! - [`config`]: one validated bundle of every stage's parameters.
//! - [`pipeline`]: the stages wired together, images to pose to cloud.
//! - [`report`]: versioned JSON run reports.
//! - [`viz`]: certainty, warp, and match-line visualization images.
//! - [`selftest`]: embedded invariant suites for validating a build.

pub mod config;
pub mod frame;
pub mod io;
pub mod loss;
pub mod matcher;
pub mod pipeline;
pub mod pose;
pub mod pyramid;
pub mod refine;
pub mod report;
pub mod selftest;
pub mod synth;
pub mod raster;
pub mod sphere;
pub mod viz;
