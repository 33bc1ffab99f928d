//! Synthetic disk-in-ellipse scenes, the Gaussian noise-prediction oracle,
//! evaluation metrics and dataset export.

mod gaussian;
mod io;
mod metrics;
mod scene;

pub use gaussian::{gaussian_optimal_epsilon, GaussianTask};
pub use io::{
    export_dataset, from_u8, load_dataset, read_mask_png, read_png, to_u8, write_png, LabelRow,
    LoadedDataset,
};
pub use metrics::{dice, diff_map, dilate, locality_score, mae, outside_inside_means, psnr};
pub use scene::{
    foreground_of, gen_dataset, gen_scene, measure_ratio, random_disk_mask, random_disk_mask_in,
    Dataset, Disk, DiskScene, SceneConfig, SceneParams, Wave,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::diffnum::DiffError;

/// Pixels by which masks are grown before locality is scored.
pub const LOCALITY_DILATION: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl From<DiffError> for SynthError {
    fn from(e: DiffError) -> Self {
        SynthError::Shape(e.to_string())
    }
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests;
