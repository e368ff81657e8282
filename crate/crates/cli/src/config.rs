use std::path::Path;

use reder::data::{atomic_write, TaskSpec};
use reder::eval::{DecodeMode, RerankScore};
use reder::model::ModelConfig;
use reder::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeKind {
    #[default]
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Rerank {
    #[default]
    None,
    ReverseLikelihood,
    /// Beam score plus reverse likelihood.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeKind,
    pub beam: usize,
    pub rerank: Rerank,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeKind::Greedy,
            beam: 20,
            rerank: Rerank::None,
        }
    }
}

impl DecodeConfig {
    pub fn mode(&self) -> Result<DecodeMode, CliError> {
        if self.beam == 0 {
            return Err(CliError::Usage("beam width must be at least 1".into()));
        }
        Ok(match (self.mode, self.rerank) {
            (DecodeKind::Greedy, Rerank::None) => DecodeMode::Greedy,
            (DecodeKind::Greedy, _) => return Err(CliError::Usage("reranking needs --decode beam".into())),
            (DecodeKind::Beam, Rerank::None) => DecodeMode::Beam { width: self.beam },
            (DecodeKind::Beam, Rerank::ReverseLikelihood) => DecodeMode::Reranked {
                width: self.beam,
                score: RerankScore::ReverseLikelihood,
            },
            (DecodeKind::Beam, Rerank::Joint) => DecodeMode::Reranked {
                width: self.beam,
                score: RerankScore::Joint,
            },
        })
    }
}

/// Every setting of a run; stored next to its outputs so it can be replayed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        atomic_write(path, text.as_bytes())?;
        Ok(())
    }
}
