//! Intensity-based lesion probability (ILP) supervision for CT volumes.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every algorithmic
//! piece of the pipeline: volume types and resampling, anisotropic
//! diffusion, histogram/KDE fitting of the ILP function, the multi-task
//! losses, a small two-head segmentation network with its trainer,
//! a synthetic phantom generator, and the evaluation metrics.
//!
//! File formats, configuration, the experiment driver and the command line
//! live in the `ilpforge-tools` crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod diffusion;
pub mod error;
pub mod ilp;
pub mod interop;
pub mod losses;
mod math;
pub mod metrics;
pub mod phantom;
pub mod presets;
pub mod toynet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Grid, MaskVolume, ProbVolume, Volume3};
