//! One TOML file describing a whole run: data, encoder, pretraining, model,
//! episodic training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::icl::IclModelConfig;
use crate::pretraining::PretrainConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Images are resized to `image_size x image_size` on load.
    pub image_size: usize,
    /// Classes held out of pretraining and episodic training.
    pub holdout_classes: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            image_size: 64,
            holdout_classes: 10,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Icl,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
    pub k: usize,
    pub tasks: usize,
    pub k_values: Vec<usize>,
    pub predictor: PredictorKind,
    pub knn_neighbors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 5,
            k: 5,
            tasks: 5000,
            k_values: (1..=10).collect(),
            predictor: PredictorKind::Icl,
            knn_neighbors: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Governs every random choice of the run; section seeds are overwritten
    /// with it on resolution.
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub model: IclModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the run seed and image size into the sections.
    pub fn resolve(&mut self) {
        let size = (self.data.image_size, self.data.image_size);
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.encoder.input_size = size;
        self.pretrain.augment.target_size = size;
        self.train.augment.target_size = size;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.image_size < 8 {
            return Err(Error::Config("data.image_size must be at least 8".into()));
        }
        if self.model.embed_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "model.embed_dim {} differs from encoder.embed_dim {}",
                self.model.embed_dim, self.encoder.embed_dim
            )));
        }
        if self.model.n_max != self.train.n_max {
            return Err(Error::Config("model.n_max and train.n_max differ".into()));
        }
        if self.eval.n == 0 || self.eval.k == 0 || self.eval.tasks == 0 || self.eval.knn_neighbors == 0 {
            return Err(Error::Config("eval n, k, tasks and knn_neighbors must be positive".into()));
        }
        if self.eval.k_values.is_empty() || self.eval.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.k_values must be non-empty and strictly increasing".into()));
        }
        self.encoder.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()
    }
}
