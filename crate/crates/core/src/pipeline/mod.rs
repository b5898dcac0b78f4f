//! Orchestration of the phantom experiments, in memory and over dataset
//! directories.

pub mod experiment;
pub mod prepare;
pub mod report;
pub mod run;
pub mod store;

pub use experiment::{
    build_datasets, calibrate, generate_split, run_arms, run_seed, Arm, Datasets, ExperimentConfig, SeedOutcome, SetKind,
    Setup, SplitSet,
};
pub use prepare::{prepare, BoxInfo, PreparedSet, PreparedVolume};
