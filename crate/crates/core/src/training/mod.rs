//! Per-class training loops, prediction, and the checkpoint format.

mod checkpoint;
mod dataset;
mod predict;
mod sgd;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::grid::GridError;
use crate::labels::{LabelError, LulcClass};
use crate::net::{Fcn8Model, NetError, WidthMultiplier};
use crate::raster::RasterError;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Manifest, TensorEntry, ARCHITECTURE, MAGIC, VERSION,
};
pub use dataset::{build_training_set, to_input, InMemoryPairs, PairSource, Sample, TrainingSet};
pub use predict::{predict, predict_downsampled, predict_grid};
pub use sgd::{train, TrainOutcome};

/// Side length fed to the network in both modes.
pub const INPUT_SIDE: u32 = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Whole image resized to 224×224, with augmentation.
    Downsample,
    /// Full-resolution image cut into 224×224 tiles, no augmentation.
    Grid,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Downsample => "downsample",
            TrainMode::Grid => "grid",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "downsample" | "downsampled" => Ok(TrainMode::Downsample),
            "grid" => Ok(TrainMode::Grid),
            _ => Err(format!("unknown mode `{s}` (expected downsample or grid)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub target_class: LulcClass,
    pub width_multiplier: WidthMultiplier,
    /// Unset means "augment in downsample mode, not in grid mode".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
}

impl TrainConfig {
    pub fn new(target_class: LulcClass, mode: TrainMode) -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 8,
            mode,
            seed: 0,
            target_class,
            width_multiplier: WidthMultiplier::FULL,
            augment: None,
        }
    }

    pub fn augment_enabled(&self) -> bool {
        self.augment.unwrap_or(self.mode == TrainMode::Downsample)
    }

    /// Every violated invariant, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".to_string());
        }
        if self.mode == TrainMode::Grid && self.augment == Some(true) {
            out.push("grid mode trains without augmentation".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::BadConfig(p.join("; ")))
        }
    }
}

/// Model and loss log at the point a non-finite value appeared. The model
/// is the last one whose parameters were all finite.
#[derive(Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub last_good: Fcn8Model,
    pub losses: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("an entire epoch had no labelled pixels")]
    NoLabelledPixels,
    #[error("loss diverged at epoch {}, batch {}", .0.epoch + 1, .0.batch + 1)]
    Diverged(Box<Divergence>),
    #[error("image {name} is {image} but its mask is {mask}")]
    MaskDims { name: String, image: crate::raster::Dims, mask: crate::raster::Dims },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}
