//! Curriculum knowledge switching for small-object segmentation.

pub mod backbone;
pub mod cli;
pub mod curriculum;
pub mod ema;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod predictor;
pub mod rng;
pub mod synthdata_io;
pub mod types;

pub use error::{CksError, Result};
