//! Continual semantic segmentation with background-shift-aware training.
//!
//! The crate is organised around the pieces of a class-incremental
//! segmentation pipeline:
//!
//! - [`taskstream`]: synthetic scenes and their conversion into
//!   sequential / disjoint / overlap task streams.
//! - [`segmodel`]: convolutional encoder plus a class-token transformer
//!   decoder whose output space grows by appending tokens.
//! - [`detector`]: prototype-based detector of old-class foreground pixels
//!   hidden in the background label.
//! - [`losses`]: background/foreground focal loss, unbiased new-class loss,
//!   masked feature distillation and the combined objective.
//! - [`replay`]: balanced loss-aware reservoir buffer and the dark
//!   experience replay losses.
//! - [`trainer`]: the continual training loop, evaluation and checkpoints.
//! - [`report`]: tables, ordering studies and curve plots built from run
//!   metrics files.

pub mod arrays;
pub mod batch;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod report;
pub mod runlog;
pub mod segmodel;
pub mod taskstream;
pub mod trainer;

pub use error::{Error, Result};

/// Compute device used by every tensor in the crate.
pub use candle_core::Device;
