//! Noise schedules, the forward noising process, training objectives,
//! the Adam training loop and checkpoint persistence.

mod checkpoint;
mod objectives;
mod schedule;
mod train;

pub use checkpoint::{
    load_checkpoint, restore_params, save_checkpoint, Checkpoint, CheckpointError, NamedTensor,
    OptimizerState, TensorData, FORMAT_VERSION, MAGIC,
};
pub use objectives::{
    ddpm_loss, ddpm_loss_value, draw_noising, q_sample, regression_loss, regression_loss_value,
    segmentation_loss, segmentation_loss_value, validate_mask, NoisePredictor, Noised, Regressor,
    Segmenter,
};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use train::{fit, probe_loss, Adam, Batch, FitReport, TrainConfig, TrainSet};

use thiserror::Error;

use crate::diffnum::DiffError;
use crate::networks::NetworkError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: u64,
        loss: f64,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<DiffError> for DiffusionError {
    fn from(e: DiffError) -> Self {
        DiffusionError::Network(NetworkError::Diff(e))
    }
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;
