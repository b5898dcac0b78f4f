//! Proposal generation, feature embedding, and the gated multi-head scorer.

pub mod detect;
pub mod embed;
pub mod heads;
pub mod proposal;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::domain::{Owner, NUM_DATASETS, NUM_HEADS};
use crate::geometry::Box2D;

pub use detect::{detect, detect_from, nms, score_proposals, DetectConfig};
pub use embed::{l2_distance, EmbedConfig, Embedder};
pub use heads::{fuse, gated_loss, score_heads, HeadParams, Label, TrainSample};
pub use proposal::{box_features, propose, propose_volume, ProposalConfig, FEATURE_DIM};
pub use train::{train_heads, training_loss, TrainConfig};

/// Head-by-dataset scores, gate weights, and fused per-dataset scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scoring {
    pub matrix: [[f64; NUM_DATASETS]; NUM_HEADS],
    pub gate: [f64; NUM_HEADS],
    pub fused: [f64; NUM_DATASETS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: String,
    pub volume_id: String,
    pub owner: Owner,
    pub bbox: Box2D,
    pub objectness: f64,
    pub features: Vec<f64>,
    pub embedding: Vec<f64>,
    pub scoring: Option<Scoring>,
}
