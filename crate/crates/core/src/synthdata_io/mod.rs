//! Synthetic data generation and the on-disk formats for datasets and
//! checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod generate;
pub mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use dataset::{generate_to, load_dataset, read_manifest, save_dataset, Manifest, ManifestItem};
pub use generate::{generate, GenConfig};
