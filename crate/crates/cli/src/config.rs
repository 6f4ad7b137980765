//! Run configuration: TOML file, then command-line overrides, then a resolved
//! snapshot written next to the outputs.

use std::path::Path;

use dinv_core::distill::{ContinualConfig, DistillConfig, TrainConfig};
use dinv_core::inversion::SynthesisConfig;
use dinv_core::pruning::PruneConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `shapes`, `mnist:DIR` or `cifar10:DIR`.
    pub source: String,
    pub image_size: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "shapes".into(),
            image_size: 32,
            per_class: 500,
            test_per_class: 100,
            classes: 10,
        }
    }
}

/// Everything a command reads. Section seeds are replaced by the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub distill: DistillConfig,
    pub prune: PruneConfig,
    pub continual: ContinualConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            train: TrainConfig { lr: 0.1, batch: 32, ..Default::default() },
            synthesis: SynthesisConfig::default(),
            distill: DistillConfig::default(),
            prune: PruneConfig::default(),
            continual: ContinualConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed into every section.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.synthesis.seed = self.seed;
        self.distill.seed = self.seed;
        self.prune.seed = self.seed;
        self.continual.seed = self.seed;
    }
}

/// Resolved configuration plus the command and its inputs, as written to disk.
#[derive(Debug)]
pub struct Snapshot<'a> {
    pub command: &'a str,
    pub inputs: Vec<(&'static str, String)>,
    pub config: &'a RunConfig,
}

impl Snapshot<'_> {
    pub fn to_toml(&self) -> Result<String, CliError> {
        let mut head = format!("command = {:?}\n", self.command);
        for (k, v) in &self.inputs {
            head.push_str(&format!("input.{k} = {v:?}\n"));
        }
        let body = toml::to_string(self.config).map_err(|e| CliError::Usage(format!("config serialization: {e}")))?;
        Ok(head + &body)
    }
}
