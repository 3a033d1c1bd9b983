//! In-situ infrared monitoring for laser powder bed fusion builds.
//!
//! Converts per-layer radiometric frame stacks into calibrated,
//! perspective-corrected feature maps registered to a voxel mesh of the part.

pub mod config;
pub mod error;
pub mod features;
pub mod framestack;
pub mod geometry;
pub mod imageops;
pub mod pipeline;
pub mod radiometry;
pub mod simulator;
pub mod spatial;
pub mod store;

pub use error::{Error, ErrorKind, Result};
