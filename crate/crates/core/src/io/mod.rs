//! Configuration, file formats and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod formats;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ConfusionMode, ExperimentConfig};
