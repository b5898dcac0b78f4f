//! Pipeline configuration: one TOML document with a section per stage and a
//! global seed. Unknown keys are rejected; every omitted key takes the
//! default shown by `lesionmine config` (see `PipelineConfig::default`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectConfig, EmbedConfig, ProposalConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::FrocConfig;
use crate::mining::MiningConfig;
use crate::phantom::PhantomConfig;
use crate::pipeline::{ExperimentConfig, Setup};
use crate::volio::container::read_text;
use crate::volio::PreprocessConfig;

/// Seeds and sweeps of the `report` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Experiment seeds; each builds its own phantom sets.
    pub seeds: Vec<u64>,
    pub theta_sweep: Vec<f64>,
    pub ratio_sweep: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            seeds: vec![1, 2, 3],
            theta_sweep: vec![0.0, 0.04, 0.0786, 0.12, 0.15, 0.2],
            ratio_sweep: vec![0.0, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

/// Default locations of stage outputs, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Output directory when `--out` is not given.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    pub phantom: PhantomConfig,
    pub experiment: ExperimentConfig,
    pub preprocess: PreprocessConfig,
    pub proposal: ProposalConfig,
    pub embed: EmbedConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub mining: MiningConfig,
    pub froc: FrocConfig,
    pub report: ReportConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rng_seed: 1,
            phantom: PhantomConfig::default(),
            experiment: ExperimentConfig::default(),
            preprocess: PreprocessConfig::default(),
            proposal: ProposalConfig::default(),
            embed: EmbedConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            mining: MiningConfig::default(),
            froc: FrocConfig::default(),
            report: ReportConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.mining.validate()?;
        self.froc.validate()?;
        if self.report.seeds.is_empty() {
            return Err(Error::InvalidInput("report.seeds is empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering of the parsed document, so
    /// formatting and omitted defaults do not change the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn setup(&self) -> Setup {
        Setup {
            phantom: self.phantom.clone(),
            experiment: self.experiment.clone(),
            preprocess: self.preprocess,
            proposal: self.proposal.clone(),
            embed: self.embed.clone(),
            train: self.train.clone(),
            detect: self.detect,
            mining: self.mining.clone(),
            froc: self.froc.clone(),
        }
    }
}
