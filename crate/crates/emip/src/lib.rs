//! Video camouflaged object detection with a frozen matching-flow network.
//!
//! A segmentation stream ([`backbone`] + [`decoder`]) and a motion stream
//! ([`flownet`]) exchange prompts through the blocks in [`prompts`]: the
//! camouflage feeder injects appearance features into the flow encoder, and
//! the motion collector injects the aligned matching distribution into the
//! appearance features. [`longterm`] adds a memory read over the last frames
//! on top of a frozen short-term model. Training stages, checkpoints, the
//! ablation grid and the `emip` command line live in [`train`],
//! [`checkpoint`], [`ablation`] and [`cli`].

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod flownet;
pub mod longterm;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompts;
pub mod train;

pub use error::{EmipError, Result};
