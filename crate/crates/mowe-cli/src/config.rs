//! TOML config file: five sections covering data, encoders, routing,
//! pipeline, and trainer. Every field has a default; unknown keys are
//! rejected with their location in the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mowe_core::error::{MoweError, Result};
use mowe_core::model::{EncoderDims, ModelConfig, RouterSetup};
use mowe_core::pipeline::{AdapterSpec, DecoderSpec};
use mowe_core::routing::RoutingConfig;
use mowe_core::synthdata::{self, TaskSpec};
use mowe_core::trainer::TrainConfig;

pub const CONFIG_ENV_VAR: &str = "MOWE_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seq_len: usize,
    pub d_in: usize,
    /// Per-dimension feature noise applied to every task.
    pub noise: f64,
    pub n_per_task: usize,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seq_len: synthdata::DEFAULT_SEQ_LEN,
            d_in: synthdata::DEFAULT_D_IN,
            noise: synthdata::DEFAULT_NOISE,
            n_per_task: 64,
            train_fraction: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersSection {
    pub base: EncoderDims,
    pub weak: EncoderDims,
    /// Weak-pool size; omit to derive it from the router setup.
    pub pool_size: Option<usize>,
}

impl Default for EncodersSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        EncodersSection {
            base: m.base,
            weak: m.weak,
            pool_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub setup: RouterSetup,
    pub epsilon_scale: f64,
    pub smoothing: bool,
    pub diversity: bool,
}

impl Default for RoutingSection {
    fn default() -> Self {
        let r = RoutingConfig::default();
        RoutingSection {
            setup: RouterSetup::IndepDep,
            epsilon_scale: r.epsilon_scale,
            smoothing: r.smoothing,
            diversity: r.diversity,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub adapter: AdapterSpec,
    pub decoder: DecoderSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub encoders: EncodersSection,
    pub routing: RoutingSection,
    pub pipeline: PipelineSection,
    pub trainer: TrainConfig,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<FileConfig> {
        toml::from_str(text)
            .map_err(|e| MoweError::format(origin, e.to_string().trim().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MoweError::io(format!("reading config {}", path.display()), e))?;
        FileConfig::parse(&text, &path.display().to_string())
    }

    /// Resolution order: explicit --config flag, then the MOWE_CONFIG
    /// environment variable, then built-in defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<FileConfig> {
        if let Some(path) = flag {
            return FileConfig::from_file(path);
        }
        if let Ok(env_path) = std::env::var(CONFIG_ENV_VAR) {
            if !env_path.is_empty() {
                return FileConfig::from_file(Path::new(&env_path));
            }
        }
        Ok(FileConfig::default())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.data.d_in,
            seq_len: self.data.seq_len,
            base: self.encoders.base,
            weak: self.encoders.weak,
            pool_size: self.encoders.pool_size,
            routers: self.routing.setup,
            routing: RoutingConfig {
                epsilon_scale: self.routing.epsilon_scale,
                smoothing: self.routing.smoothing,
                diversity: self.routing.diversity,
            },
            adapter: self.pipeline.adapter.clone(),
            decoder: self.pipeline.decoder.clone(),
        }
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let mut tasks = synthdata::default_tasks(self.data.d_in)?;
        for task in &mut tasks {
            task.noise = self.data.noise;
        }
        Ok(tasks)
    }
}
