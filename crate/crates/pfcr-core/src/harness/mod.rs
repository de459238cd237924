//! Experiment harness: datasets, baseline training, evaluation, checkpoint
//! and report I/O, and the ablation driver.

mod ablate;
mod checkpoint;
mod dataset;
mod idx;
mod report;
mod run;
mod train;

pub use ablate::{median, run_ablation_suite, write_ablation_csv, AblationRow, AblationTable, Arm};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{
    default_recon_count, image_batches, make_synthetic, sample_calibration, Dataset, Split,
};
pub use idx::{load_idx_dataset, load_idx_images, load_idx_labels};
pub use report::{
    write_curves_csv, BaselineConfig, DatasetConfig, QuantSettings, RunConfig, RunReport,
    SamplingConfig,
};
pub use run::{load_dataset, quantize_run, PreparedData, QuantizeOutcome};
pub use train::{evaluate_top1, train_baseline};

use crate::pos::PosError;
use crate::vit::ModelError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pos(#[from] PosError),
    #[error("{path}: bad magic {actual:#010x} at byte 0, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, actual: u32 },
    #[error("{path}: truncated at byte {actual}, expected {expected} bytes")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("label file holds {labels} entries but image file holds {images}")]
    LabelCount { images: usize, labels: usize },
    #[error("need {need} samples but dataset holds {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Exit-code class: `2` for configuration/input problems, `3` for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Diverged(_) => 3,
            HarnessError::Pos(PosError::Stage { .. }) => 3,
            _ => 2,
        }
    }
}
