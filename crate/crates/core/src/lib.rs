//! Allocation-only building blocks for camouflaged-motion video segmentation.
//!
//! Everything here is a pure function of its inputs and runs without `std`:
//!
//! - [`synth`]: procedural camouflaged-sprite clips with ground-truth masks and flow.
//! - [`flowfile`]: the `CFL1` little-endian flow field encoding.
//! - [`metrics`]: S-measure, weighted F-measure, max F-measure, MAE, Dice and IoU.
//! - [`photometric`]: reference backward warping and Gaussian-window SSIM.
//! - [`memory`]: the bounded FIFO pool used by long-term memory reads.
//! - [`schedule`]: cosine-annealed learning rates.
//! - [`flowviz`]: flow-to-color rendering with the standard color wheel.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod flowfile;
pub mod flowviz;
pub mod memory;
pub mod metrics;
pub mod noise;
pub mod photometric;
pub mod schedule;
pub mod synth;

pub use flowfile::{decode_flow, encode_flow, FlowFileError};
pub use memory::{FifoPool, PoolError};
pub use metrics::{MetricError, MetricReport};
pub use synth::{generate_clip, CamoGenConfig, ConfigError, VideoClip};
