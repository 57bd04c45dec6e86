//! Run configuration shared by every command.
//!
//! A JSON document with optional sections; omitted fields take their
//! defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::diffusion::ScheduleConfig;
use crate::dit::{DiTConfig, Pooling};
use crate::downstream::HeadConfig;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    /// External `sample_id,fold` assignment; overrides the seeded split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds_csv: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            seed: 0,
            folds_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// When set, replaces `model.feature_pooling`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    pub t_feat: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            pooling: None,
            t_feat: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SampleConfig {
    pub seed: u64,
    /// Reverse steps; `None` runs the full chain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}


#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DiTConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub feature: FeatureConfig,
    pub head: HeadConfig,
    pub synth: CorpusSpec,
    pub sample: SampleConfig,
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = cfg.feature.pooling {
            cfg.model.feature_pooling = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `eval.folds_csv` paths resolve against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(f) = &cfg.eval.folds_csv {
            if f.is_relative() {
                cfg.eval.folds_csv = Some(path.parent().unwrap_or(Path::new(".")).join(f));
            }
        }
        Ok(cfg)
    }

    /// Replaces every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.synth.seed = seed;
        self.sample.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.model.timesteps != self.schedule.timesteps {
            return Err(Error::Config(format!(
                "model.T = {} but schedule.T = {}",
                self.model.timesteps, self.schedule.timesteps
            )));
        }
        self.optim.validate()?;
        self.train.validate()?;
        if self.eval.k < 2 {
            return Err(Error::Config(format!("eval.k must be at least 2, got {}", self.eval.k)));
        }
        if self.feature.t_feat == 0 || self.feature.t_feat > self.model.timesteps {
            return Err(Error::Config(format!(
                "feature.t_feat = {} outside 1..={}",
                self.feature.t_feat, self.model.timesteps
            )));
        }
        self.head.validate()?;
        if self.synth.n == 0 || self.synth.size < 4 {
            return Err(Error::Config("synth needs n >= 1 and size >= 4".into()));
        }
        if !(self.synth.rating_noise >= 0.0 && self.synth.rating_noise.is_finite()) {
            return Err(Error::Config("synth.rating_noise must be finite and non-negative".into()));
        }
        if let Some(s) = self.sample.steps {
            if s == 0 || s > self.schedule.timesteps {
                return Err(Error::Config(format!(
                    "sample.steps = {s} outside 1..={}",
                    self.schedule.timesteps
                )));
            }
        }
        Ok(())
    }
}
