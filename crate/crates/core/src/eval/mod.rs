//! Volumetric and key-slice FROC evaluation.

pub mod froc;
pub mod matching;
pub mod stack;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use froc::{evaluate_key_slices, evaluate_volumes, froc, stratify_by_organ, FrocResult, VolumeDetections};
pub use matching::{gt_units, match_detections, GtUnit, MatchOutcome};
pub use stack::stack_boxes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrocMode {
    Volumetric,
    KeySlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrocConfig {
    pub fp_levels_volume: Vec<f64>,
    pub fp_levels_slice: Vec<f64>,
    pub match_iou: f64,
    pub stack_iou: f64,
    pub mode: FrocMode,
}

impl Default for FrocConfig {
    fn default() -> Self {
        FrocConfig {
            fp_levels_volume: vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            fp_levels_slice: vec![0.5, 1.0, 2.0, 4.0],
            match_iou: 0.5,
            stack_iou: 0.5,
            mode: FrocMode::Volumetric,
        }
    }
}

impl FrocConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lv) in [("fp_levels_volume", &self.fp_levels_volume), ("fp_levels_slice", &self.fp_levels_slice)] {
            if lv.is_empty() || lv[0] <= 0.0 || lv.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and strictly increasing"
                )));
            }
        }
        for (name, v) in [("match_iou", self.match_iou), ("stack_iou", self.stack_iou)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> &[f64] {
        match self.mode {
            FrocMode::Volumetric => &self.fp_levels_volume,
            FrocMode::KeySlice => &self.fp_levels_slice,
        }
    }
}
