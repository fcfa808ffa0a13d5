//! Desk-scale end-to-end scene text spotter: a query-based set-prediction
//! detector coupled to an attention-based recognizer through a feature
//! conversion module that routes recognition gradients back into detection.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod font;
pub mod geometry;
pub mod mask_codec;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rc;
pub mod recognizer;
pub mod roi;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
