//! Missing annotation matching, negative region mining, and assembly of the
//! positive / ignore / negative regions used for finetuning.

pub mod calibrate;
pub mod mam;
pub mod nrm;
pub mod regions;
pub mod report;
pub mod slices;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{calibrate_theta, LabeledDistance};
pub use mam::{mam_match, MamOutput, MatchPair};
pub use nrm::nrm_suspicious;
pub use regions::{assemble_regions, label_proposals, sample_negatives, RegionLabeling};
pub use report::MiningReport;
pub use slices::{build_finetune_set, sample_slices, SliceKey};

/// What suspicious boxes become during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspiciousPolicy {
    Ignore,
    Positive,
}

/// How the universal and single-type datasets are combined for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// Universal dataset only.
    Single,
    /// Every dataset merged into dataset 0.
    Concat,
    /// Merged into dataset 0, but single-type data contributes positives only.
    ConcatPositive,
    /// Separate score columns per dataset, no mining.
    Multitask,
    /// Separate score columns plus MAM and NRM.
    Proposed,
}

impl std::str::FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Combination::Single),
            "concat" => Ok(Combination::Concat),
            "concat-positive" | "concat_positive" => Ok(Combination::ConcatPositive),
            "multitask" => Ok(Combination::Multitask),
            "proposed" => Ok(Combination::Proposed),
            _ => Err(Error::InvalidInput(format!("unknown combination policy '{s}'"))),
        }
    }
}

impl std::str::FromStr for SuspiciousPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ignore" => Ok(SuspiciousPolicy::Ignore),
            "positive" => Ok(SuspiciousPolicy::Positive),
            _ => Err(Error::InvalidInput(format!("unknown suspicious policy '{s}'"))),
        }
    }
}

/// Distance threshold calibrated for the frozen projection embedding on
/// held-out phantoms (precision of same-instance recovery >= 90%).
pub const CALIBRATED_THETA: f64 = 0.0786;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub theta: f64,
    pub sigma: f64,
    pub slice_step_mm: f64,
    pub unlabeled_ratio: f64,
    pub suspicious_policy: SuspiciousPolicy,
    pub combination: Combination,
    /// IoU above which a proposal duplicates an existing annotation.
    pub duplicate_iou: f64,
    /// IoU used to merge suspicious boxes from different experts.
    pub merge_iou: f64,
    /// IoU above which a proposal counts as a positive training sample.
    pub positive_iou: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            theta: CALIBRATED_THETA,
            sigma: 0.5,
            slice_step_mm: 5.0,
            unlabeled_ratio: 0.5,
            suspicious_policy: SuspiciousPolicy::Ignore,
            combination: Combination::Proposed,
            duplicate_iou: 0.5,
            merge_iou: 0.5,
            positive_iou: 0.5,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) {
            return Err(Error::InvalidInput(format!("theta must be non-negative, got {}", self.theta)));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::InvalidInput(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if !(self.unlabeled_ratio >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "unlabeled ratio must be non-negative, got {}",
                self.unlabeled_ratio
            )));
        }
        if !(self.slice_step_mm > 0.0) {
            return Err(Error::InvalidInput("slice step must be positive".into()));
        }
        for (name, v) in [
            ("duplicate_iou", self.duplicate_iou),
            ("merge_iou", self.merge_iou),
            ("positive_iou", self.positive_iou),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}
