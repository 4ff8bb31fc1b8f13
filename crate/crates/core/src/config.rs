//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, LpipsConfig};
use crate::mask::{MixConfig, OcclusionSpec};
use crate::model::{check_divisible, GeneratorConfig, PatchDiscriminatorConfig};
use crate::nn::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    /// JSON-lines loss log; defaults to `<checkpoint_dir>/losses.jsonl`.
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Square side images are resized to; defaults per task (256 or 512).
    pub image_size: Option<usize>,
    /// Task-loss weight; defaults per task (5 or 1.2).
    pub lambda: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub maskmix_enabled: bool,
    pub precision: Precision,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optimizer: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: PatchDiscriminatorConfig,
    pub perceptual: LpipsConfig,
    pub adapter: AdapterConfig,
    pub maskmix: MixConfig,
    pub occlusion: OcclusionSpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            image_size: None,
            lambda: None,
            seed: 0,
            batch_size: 8,
            max_steps: 100_000,
            maskmix_enabled: true,
            precision: Precision::F32,
            checkpoint_every: 5000,
            log_every: 100,
            optimizer: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: PatchDiscriminatorConfig::default(),
            perceptual: LpipsConfig::default(),
            adapter: AdapterConfig::default(),
            maskmix: MixConfig::default(),
            occlusion: OcclusionSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Makes relative paths in the file relative to the file's directory.
    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.paths.train_manifest);
        fix(&mut self.paths.test_manifest);
        fix(&mut self.paths.checkpoint_dir);
        fix(&mut self.paths.report_dir);
        fix(&mut self.paths.loss_log);
        fix(&mut self.adapter.weights_path);
        fix(&mut self.perceptual.weights);
        fix(&mut self.generator.pretrained_encoder);
    }

    pub fn image_size(&self) -> usize {
        self.image_size.unwrap_or_else(|| self.task.default_image_size())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.task.default_lambda())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size();
        check_divisible(s, s)?;
        self.loss_weights()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.adapter.kind.task() != self.task {
            return Err(Error::Config(format!(
                "adapter {:?} does not serve the {:?} task",
                self.adapter.kind, self.task
            )));
        }
        self.generator.network.validate()?;
        self.maskmix.validate()?;
        self.occlusion.validate()?;
        self.adapter.validate()?;
        Ok(())
    }
}
