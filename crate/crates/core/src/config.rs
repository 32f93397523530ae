//! Experiment configuration, one TOML document with a section per module.
//! Keys may be written flat with section prefixes (`optim.lr0 = 0.1`) or as
//! tables; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::audio::FeatureConfig;
use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pooling::PoolingConfig;
use crate::trainer::{OptimConfig, TrainConfig};
use crate::trunk::TrunkConfig;

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Training manifest.
    pub train_manifest: Option<PathBuf>,
    /// Validation trial list.
    pub val_trials: Option<PathBuf>,
    /// Receives `metrics.csv`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub crop_seconds: f64,
    pub episodes_per_epoch: Option<usize>,
    pub val_every: usize,
    pub record_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            crop_seconds: t.crop_seconds,
            episodes_per_epoch: t.episodes_per_epoch,
            val_every: t.val_every,
            record_time: t.record_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Adds the global softmax term to the episode loss.
    pub global_classification: bool,
    pub paths: PathsConfig,
    pub features: FeatureConfig,
    pub trunk: TrunkConfig,
    pub pooling: PoolingConfig,
    pub episode: EpisodeConfig,
    pub optim: OptimConfig,
    pub train: TrainSection,
    /// Scoring during validation.
    pub val: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            global_classification: true,
            paths: PathsConfig::default(),
            features: FeatureConfig::default(),
            trunk: TrunkConfig::default(),
            pooling: PoolingConfig::default(),
            episode: EpisodeConfig::default(),
            optim: OptimConfig::default(),
            train: TrainSection::default(),
            val: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.train_manifest,
            &mut cfg.paths.val_trials,
            &mut cfg.paths.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.pooling.validate()?;
        self.episode.validate()?;
        self.optim.validate()?;
        self.val.dcf.validate()?;
        if !(self.train.crop_seconds > 0.0) {
            return Err(Error::Config("train.crop_seconds must be positive".into()));
        }
        if self.train.val_every == 0 {
            return Err(Error::Config("train.val_every must be positive".into()));
        }
        if self.trunk.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "trunk.n_mels {} differs from features.n_mels {}",
                self.trunk.n_mels, self.features.n_mels
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episode: self.episode,
            optim: self.optim,
            crop_seconds: self.train.crop_seconds,
            episodes_per_epoch: self.train.episodes_per_epoch,
            val_every: self.train.val_every,
            val: self.val,
            record_time: self.train.record_time,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serialises")
    }
}
