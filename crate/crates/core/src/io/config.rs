use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assigner::{TlaConfig, TlaPlan};
use crate::data::{load_cifar10, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ReViTConfig;
use crate::numerics::AdamWConfig;
use crate::training::{DistillConfig, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of the CIFAR-10 binary batches.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Samples kept from the training split (synthetic: samples generated).
    pub train_size: usize,
    pub test_size: usize,
    /// Seed of the synthetic generator; the test split uses `synth_seed + 1`.
    #[serde(default)]
    pub synth_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlaSettings {
    #[serde(default = "default_conv1")]
    pub conv1_channels: usize,
    #[serde(default = "default_conv2")]
    pub conv2_channels: usize,
    pub plan: TlaPlan,
}

fn default_conv1() -> usize {
    8
}
fn default_conv2() -> usize {
    16
}

impl Default for TlaSettings {
    fn default() -> Self {
        Self {
            conv1_channels: default_conv1(),
            conv2_channels: default_conv2(),
            plan: TlaPlan {
                epochs: 20,
                batch_size: 64,
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                seed: 0,
                class_weights: true,
            },
        }
    }
}

/// Everything one pipeline run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ReViTConfig,
    pub plan: TrainPlan,
    /// Self-distillation settings; absent means plain cross-entropy students.
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub tla: TlaSettings,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        if let Some(d) = &self.distill {
            d.validate()?;
            if self.plan.distill.is_some() {
                return Err(Error::Validation(
                    "distill given both at top level and inside plan".into(),
                ));
            }
        }
        self.tla.plan.validate()?;
        self.tla_config().validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Validation("output_dir must not be empty".into()));
        }
        if self.data.dir.as_ref().is_some_and(|d| d.as_os_str().is_empty()) {
            return Err(Error::Validation("data.dir must not be empty".into()));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Validation("train_size and test_size must be >= 1".into()));
        }
        if self.data.source == DataSource::Cifar10 {
            if self.model.num_classes != 10 || self.model.channels != 3 || self.model.image_size != 32 {
                return Err(Error::Validation(
                    "CIFAR-10 needs num_classes 10, channels 3 and image_size 32".into(),
                ));
            }
        } else if self.model.channels != 3 {
            return Err(Error::Validation("synthetic images have 3 channels".into()));
        }
        Ok(())
    }

    /// Training plan with the run seed and top-level distillation applied.
    pub fn effective_plan(&self) -> TrainPlan {
        let mut plan = self.plan.clone();
        plan.seed = self.seed;
        if self.distill.is_some() {
            plan.distill = self.distill.clone();
        }
        plan
    }

    pub fn tla_config(&self) -> TlaConfig {
        TlaConfig {
            image_size: self.model.image_size,
            channels: self.model.channels,
            conv1_channels: self.tla.conv1_channels,
            conv2_channels: self.tla.conv2_channels,
            num_lengths: self.model.grids.len(),
        }
    }

    pub fn tla_plan(&self) -> TlaPlan {
        let mut plan = self.tla.plan.clone();
        plan.seed = self.seed.wrapping_add(1);
        plan
    }

    /// Loads one split as configured.
    pub fn load_data(&self, split: Split) -> Result<Dataset> {
        let size = match split {
            Split::Train => self.data.train_size,
            Split::Test => self.data.test_size,
        };
        match self.data.source {
            DataSource::Synth => {
                let seed = match split {
                    Split::Train => self.data.synth_seed,
                    Split::Test => self.data.synth_seed.wrapping_add(1),
                };
                Ok(synth_dataset(seed, size, self.model.num_classes, self.model.image_size)?.with_split(split))
            }
            DataSource::Cifar10 => {
                let dir = self
                    .data
                    .dir
                    .as_ref()
                    .ok_or_else(|| Error::Validation("cifar10 source needs data.dir or --data-dir".into()))?;
                load_cifar10(dir, split)?.head(size)
            }
        }
    }
}
