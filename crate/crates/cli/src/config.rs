//! The experiment record: every module config in one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use cycleflow::distill::DistillConfig;
use cycleflow::espada::EspadaConfig;
use cycleflow::flowmatch::FlowConfig;
use cycleflow::guidance::GuidanceConfig;
use cycleflow::model::ModelConfig;
use cycleflow::pipeline::TrainConfig;
use cycleflow::runner::RunConfig;
use cycleflow::simenv::{default_tasks, ExpertConfig, TaskSpec, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "CYCLEFLOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub expert: ExpertConfig,
    pub tasks: Vec<TaskSpec>,
    pub flow: FlowConfig,
    pub model: ModelConfig,
    /// Schedule for pretraining and post-training.
    pub train: TrainConfig,
    pub espada: EspadaConfig,
    pub distill: DistillConfig,
    /// Schedule for distillation.
    pub distill_train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub run: RunConfig,
    pub stages: Vec<String>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            expert: ExpertConfig::default(),
            tasks: default_tasks(),
            flow: FlowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            espada: EspadaConfig::default(),
            distill: DistillConfig::default(),
            distill_train: TrainConfig {
                steps: 1500,
                ..TrainConfig::default()
            },
            guidance: GuidanceConfig::default(),
            run: RunConfig::default(),
            stages: vec!["pretrain".into(), "posttrain".into(), "distill".into()],
            out_dir: None,
        }
    }
}

/// A loaded config plus the raw file document, so callers can tell which
/// values the file set explicitly.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    raw: serde_json::Value,
}

impl Loaded {
    /// Defaults, overridden by the file, with the seed resolved as
    /// flag > file > `CYCLEFLOW_SEED` > 0.
    pub fn resolve(file: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let raw = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<serde_json::Value>(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        let mut config: ExperimentConfig =
            serde_json::from_value(raw.clone()).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        let loaded = Self {
            config: config.clone(),
            raw,
        };
        config.seed = match (seed_flag, loaded.file_sets(&["seed"])) {
            (Some(s), _) => s,
            (None, true) => config.seed,
            (None, false) => env_seed()?.unwrap_or(0),
        };
        Ok(Self { config, ..loaded })
    }

    /// Whether the config file gave a value at this key path.
    pub fn file_sets(&self, path: &[&str]) -> bool {
        let mut v = &self.raw;
        for key in path {
            match v.get(key) {
                Some(next) => v = next,
                None => return false,
            }
        }
        true
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
