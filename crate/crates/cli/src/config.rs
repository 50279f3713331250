use std::path::{Path, PathBuf};

use perpcs::assembler::AssemblyConfig;
use perpcs::bench::experiment::{EvalConfig, ExperimentConfig, SharingConfig, SweepConfig};
use perpcs::bench::synth::{SplitCounts, TaskSpec};
use perpcs::model::{ModelConfig, TrainConfig};
use perpcs::pipeline::BaseTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// One file that fully determines a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub splits: SplitCounts,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub base: BaseTrainConfig,
    #[serde(default = "default_adapter")]
    pub adapter: TrainConfig,
    #[serde(default = "default_gate")]
    pub gate: TrainConfig,
    #[serde(default)]
    pub sharing: SharingConfig,
    #[serde(default)]
    pub assembly: AssemblyConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

fn default_adapter() -> TrainConfig {
    ExperimentConfig::default().adapter
}

fn default_gate() -> TrainConfig {
    ExperimentConfig::default().gate
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_experiment(ExperimentConfig::default())
    }
}

impl RunConfig {
    pub fn from_experiment(e: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: e.seed,
            out_dir: None,
            task: e.task,
            splits: e.splits,
            model: e.model,
            base: e.base,
            adapter: e.adapter,
            gate: e.gate,
            sharing: e.sharing,
            assembly: e.assembly,
            eval: e.eval,
            sweeps: e.sweeps,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            task: self.task.clone(),
            splits: self.splits,
            model: self.model.clone(),
            base: self.base.clone(),
            adapter: self.adapter.clone(),
            gate: self.gate.clone(),
            sharing: self.sharing.clone(),
            assembly: self.assembly.clone(),
            eval: self.eval.clone(),
            sweeps: self.sweeps.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.experiment().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
