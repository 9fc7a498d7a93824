//! Run configuration: one TOML file per run, with named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::par::Execution;
use crate::training::TrainConfig;

pub const PAPER_PRESET: &str = include_str!("../../../presets/paper.toml");
pub const DESK_PRESET: &str = include_str!("../../../presets/desk.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn source(self) -> &'static str {
        match self {
            Preset::Paper => PAPER_PRESET,
            Preset::Desk => DESK_PRESET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mf_hidden: Vec<usize>,
    pub adapter_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Classes of the reward-mode adapter (one per reward target).
    pub reward_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mf_hidden: vec![256; 4],
            adapter_hidden: vec![128; 3],
            embed_dim: 8,
            reward_classes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of checkerboard training points when no dataset file is given.
    pub n_train: usize,
    /// Observation noise of both operator classes.
    pub sigma: f64,
    /// CSV of training points (header `x1,x2`).
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 100_000,
            sigma: 0.1,
            path: None,
        }
    }
}

/// Checkpoints consumed by a stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Generator initialization for a training stage.
    pub init: Option<PathBuf>,
    /// Checkpoint of the same stage to continue from.
    pub resume: Option<PathBuf>,
    /// Model for `sample` and `eval`.
    pub model: Option<PathBuf>,
    /// Second model evaluated alongside `model` (e.g. frozen-generator run).
    pub baseline: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub pretrain_fm: TrainConfig,
    pub train_mf: TrainConfig,
    pub train_vfm: TrainConfig,
    pub train_frozen: TrainConfig,
    pub train_reward: TrainConfig,
}

impl Default for Stages {
    fn default() -> Self {
        let vfm = TrainConfig::default();
        Self {
            pretrain_fm: TrainConfig {
                adaptive: false,
                ..vfm.clone()
            },
            train_mf: vfm.clone(),
            train_frozen: TrainConfig {
                adaptive: false,
                ..vfm.clone()
            },
            train_reward: vfm.clone(),
            train_vfm: vfm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Observations to draw posterior samples for, as `(class, y)`.
    pub observations: Vec<(usize, f64)>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            observations: vec![(0, 0.5), (1, -1.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub ema: Vec<bool>,
    /// Generator steps per cell; overrides the VFM stage.
    pub iters: usize,
    /// Sampling step counts evaluated per cell.
    pub steps: Vec<usize>,
    /// Evaluation budgets per cell.
    pub eval: EvalConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ema: vec![true, false],
            iters: 2000,
            steps: vec![1, 4],
            eval: EvalConfig {
                b: 500,
                j: 50,
                n: 1000,
                m: 1000,
                ..EvalConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fixed chunking and no wall-clock values in outputs.
    pub deterministic: bool,
    pub execution: Execution,
    pub out: PathBuf,
    /// Sampling partition size `K`.
    pub steps: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub inputs: Inputs,
    pub stages: Stages,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            execution: Execution::Parallel,
            out: PathBuf::from("out"),
            steps: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            inputs: Inputs::default(),
            stages: Stages::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Chunks used under the deterministic flag when the config leaves it to
/// the thread count.
pub const DETERMINISTIC_CHUNKS: usize = 4;

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(p: Preset) -> Result<Self> {
        Self::parse(p.source())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&src)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for s in [
            &self.stages.pretrain_fm,
            &self.stages.train_mf,
            &self.stages.train_vfm,
            &self.stages.train_frozen,
            &self.stages.train_reward,
        ] {
            s.validate()?;
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.model.mf_hidden.is_empty() || self.model.adapter_hidden.is_empty() {
            return Err(Error::Config("networks need at least one hidden layer".into()));
        }
        if !(self.data.sigma > 0.0) {
            return Err(Error::Config(format!("data.sigma must be positive, got {}", self.data.sigma)));
        }
        if self.data.path.is_none() && self.data.n_train == 0 {
            return Err(Error::Config("data.n_train must be positive".into()));
        }
        if self.ablate.taus.is_empty() || self.ablate.alphas.is_empty() || self.ablate.ema.is_empty() {
            return Err(Error::Config("ablation grid must be nonempty".into()));
        }
        Ok(())
    }

    /// Input paths referenced by the config must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let paths = [
            &self.data.path,
            &self.inputs.init,
            &self.inputs.resume,
            &self.inputs.model,
            &self.inputs.baseline,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Stage config with the deterministic chunking applied.
    pub fn stage(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if self.deterministic && c.chunks == 0 {
            c.chunks = DETERMINISTIC_CHUNKS;
        }
        c
    }
}
