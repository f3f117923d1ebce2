//! JSON run configuration.
//!
//! Every section is optional and falls back to defaults; unknown keys are
//! rejected. The config hash is the SHA-256 of the document re-serialized
//! with sorted keys and no whitespace, so formatting does not change it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::loss::Temperature;
use crate::model::ModelConfig;
use crate::optim::{LarsConfig, SgdConfig};
use crate::par::Execution;
use crate::synthdata::SynthSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Cacon,
    SimclrBaseline,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cacon" => Ok(Mode::Cacon),
            "simclr-baseline" => Ok(Mode::SimclrBaseline),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Cacon => "cacon",
            Mode::SimclrBaseline => "simclr-baseline",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Every image is tagged `train`.
    None,
    /// Images in `finetune_groups` are tagged `finetune`, the rest `test`.
    #[default]
    CrossAge,
    /// A seeded `test_fraction` of each subject's images is tagged `test`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub policy: SplitPolicy,
    pub finetune_groups: Vec<u32>,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            policy: SplitPolicy::CrossAge,
            finetune_groups: vec![0, 1, 2, 3],
            test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of the (source) dataset.
    pub manifest: Option<PathBuf>,
    /// Manifest of the cross-dataset target.
    pub target_manifest: Option<PathBuf>,
    /// Optional verification pairs CSV (`a,b,same`, paths as in the manifest).
    pub pairs: Option<PathBuf>,
    /// Verification pairs on the cross-dataset target; without them the
    /// target is scored by 1-NN identification.
    pub target_pairs: Option<PathBuf>,
    pub synth: SynthSpec,
    pub split: SplitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: Temperature,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: Temperature::default(),
            margin: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub pretrain: LarsConfig,
    pub finetune: SgdConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    /// Upper bound on the number of leave-one-image-out folds.
    pub loio_cap: usize,
    pub verification_folds: usize,
    /// Pairs per label when verification pairs are sampled from the test split.
    pub verification_pairs: usize,
    pub checkpoint: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cacon,
            pretrain_epochs: 30,
            pretrain_batch: 256,
            finetune_epochs: 20,
            finetune_batch: 64,
            loio_cap: 2000,
            verification_folds: 10,
            verification_pairs: 1000,
            checkpoint: None,
            classifier: None,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.augment
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data
            .synth
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optim
            .pretrain
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.pipeline;
        if p.pretrain_batch < 1 || p.finetune_batch < 1 {
            return invalid("batch sizes must be >= 1".into());
        }
        if p.verification_folds < 2 {
            return invalid("verification_folds must be >= 2".into());
        }
        if self.loss.margin < 0.0 {
            return invalid("loss.margin must be >= 0".into());
        }
        if self.model.d_h == 0 || self.model.d_z == 0 {
            return invalid("model dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.split.test_fraction) {
            return invalid("split.test_fraction must lie in [0,1)".into());
        }
        Ok(())
    }

    /// Resolves relative paths against `base`.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.target_manifest);
        fix(&mut self.data.pairs);
        fix(&mut self.data.target_pairs);
        fix(&mut self.pipeline.checkpoint);
        fix(&mut self.pipeline.classifier);
    }
}

/// Parsed config plus the hash of its canonical form.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
}

pub fn canonical_hash(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key.
    let bytes = serde_json::to_vec(value).expect("values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let hash = canonical_hash(&value);
    let config: RunConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok(LoadedConfig { config, hash })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut loaded = parse_config(&text)?;
    loaded
        .config
        .resolve(path.parent().unwrap_or_else(|| Path::new(".")));
    Ok(loaded)
}
