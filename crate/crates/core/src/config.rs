//! Run configuration (TOML) and reproducibility records.
//!
//! Every field has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected at every level.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::control::ConditionConfig;
use crate::diffusion::{DdimConfig, GuidanceConfig, NoiseSchedule, ScheduleKind, Stage, StageConfig};
use crate::diffusion::sample::{SampleOptions, DEFAULT_ALPHA_MOTION};
use crate::error::{Error, Result};
use crate::extractor::{ProjectorConfig, ProjectorTraining};
use crate::illusion::DatasetConfig;
use crate::model::Architecture;
use crate::par::Execution;
use crate::rng;
use crate::view::ViewKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsConfig {
    pub count: u64,
    pub image_size: usize,
    pub view: ViewKind,
    pub piece_grid: (usize, usize),
    pub sampler: DdimConfig,
    /// Renders per (style, object) cell used to fit the pair generator's prior.
    pub prior_samples: usize,
    /// One style per line; the built-in list when absent.
    pub styles_file: Option<PathBuf>,
    pub objects_file: Option<PathBuf>,
}

impl Default for PairsConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            count: 200,
            image_size: d.image_size,
            view: d.view,
            piece_grid: d.piece_grid,
            sampler: d.sampler,
            prior_samples: 8,
            styles_file: None,
            objects_file: None,
        }
    }
}

impl PairsConfig {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig { image_size: self.image_size, view: self.view, piece_grid: self.piece_grid, sampler: self.sampler }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub mse_weight: f64,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        let t = ProjectorTraining::default();
        let c = ProjectorConfig::new(1, 1);
        Self { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, margin: c.margin, mse_weight: c.mse_weight }
    }
}

/// Stage settings without the seed, which is always derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub frames: usize,
    pub text_dropout: f64,
    pub style_dropout: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        let s = StageConfig::default();
        Self {
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            frames: s.frames,
            text_dropout: s.text_dropout,
            style_dropout: s.style_dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    /// Rayon fan-out when built with the `parallel` feature.
    pub parallel: bool,
    pub alpha_motion: f64,
    pub frames: usize,
    pub model: Architecture,
    pub schedule: ScheduleConfig,
    pub sampler: DdimConfig,
    pub guidance: GuidanceConfig,
    pub condition: ConditionConfig,
    pub pairs: PairsConfig,
    pub projector: ProjectorSection,
    pub base: StageSection,
    pub motion: StageSection,
    pub style: StageSection,
    pub control: StageSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallel: true,
            alpha_motion: DEFAULT_ALPHA_MOTION,
            frames: 6,
            model: Architecture::default(),
            schedule: ScheduleConfig::default(),
            sampler: DdimConfig::default(),
            guidance: GuidanceConfig::default(),
            condition: ConditionConfig::default(),
            pairs: PairsConfig::default(),
            projector: ProjectorSection::default(),
            base: StageSection::default(),
            motion: StageSection { frames: 6, ..StageSection::default() },
            style: StageSection::default(),
            control: StageSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.guidance.validate()?;
        if !self.alpha_motion.is_finite() {
            return Err(Error::Config("alpha_motion must be finite".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sampler steps {} must be in 1..={}",
                self.sampler.steps, self.schedule.steps
            )));
        }
        Ok(())
    }

    /// The fully resolved document, as logged and hashed.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_kind(self.schedule.kind, self.schedule.steps)
    }

    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (s, stream) = match stage {
            Stage::Base => (&self.base, 0xBA5E),
            Stage::Motion => (&self.motion, 0x4071),
            Stage::Style => (&self.style, 0x5171),
            Stage::Control => (&self.control, 0xC791),
        };
        StageConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            frames: s.frames,
            text_dropout: s.text_dropout,
            style_dropout: s.style_dropout,
            seed: rng::mix(self.seed, stream),
        }
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig { margin: self.projector.margin, mse_weight: self.projector.mse_weight, ..self.model.projector_config() }
    }

    pub fn projector_training(&self) -> ProjectorTraining {
        ProjectorTraining {
            epochs: self.projector.epochs,
            batch_size: self.projector.batch_size,
            lr: self.projector.lr,
            seed: rng::mix(self.seed, 0x9205),
        }
    }

    pub fn model_seed(&self) -> u64 {
        rng::mix(self.seed, 0xD17)
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            frames: self.frames,
            guidance: self.guidance,
            alpha_motion: self.alpha_motion,
            sampler: self.sampler,
            seed: rng::mix(self.seed, 0x5A3),
        }
    }
}

/// What a command read and wrote, with content hashes, so a run can be
/// checked against a repeat.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self { command: command.into(), seed: config.seed, config_sha256: config.sha256()?, ..Self::default() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
