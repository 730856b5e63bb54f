//! Attention-guided whole-slide candida screening.
//!
//! Pipeline: crop slides into tiles, classify each tile with a
//! detection-pretrained residual encoder plus a skip self-attention head
//! trained with attention-guided contrastive losses, then aggregate the
//! top-k tiles of a slide with a small transformer.

pub mod aggregator;
pub mod attention;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod ssa;
pub mod synth;
pub mod tiling;
pub mod train;
pub mod types;

pub use error::{Error, Result};
