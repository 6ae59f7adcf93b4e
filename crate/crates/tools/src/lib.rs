//! File formats, configuration, the phantom study driver and the command
//! line front end of ilpforge.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod error;
pub mod model_io;
pub mod nifti;
pub mod study;

pub use error::{ToolError, ToolResult};
