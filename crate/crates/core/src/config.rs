//! Run configuration files (TOML), ablation switches and presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::blockworld::{Aabb, EnvConfig, RewardMode};
use crate::error::{Error, Result};
use crate::replay::HerMode;
use crate::trainer::{CurriculumSchedule, HerConfig, TrainConfig, TrainerSetup};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_curiosity: bool,
    pub use_multi_criteria: bool,
    pub use_curriculum: bool,
    /// Hindsight relabeling at all; off gives plain replay.
    #[serde(default = "yes")]
    pub use_her: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Preset::All3.ablation()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    All3,
    NoCuriosity,
    NoMultiCriteria,
    NoCurriculum,
    CurriculumOnly,
    Vanilla,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::All3,
        Preset::NoCuriosity,
        Preset::NoMultiCriteria,
        Preset::NoCurriculum,
        Preset::CurriculumOnly,
        Preset::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::All3 => "all3",
            Preset::NoCuriosity => "no_curiosity",
            Preset::NoMultiCriteria => "no_multi_criteria",
            Preset::NoCurriculum => "no_curriculum",
            Preset::CurriculumOnly => "curriculum_only",
            Preset::Vanilla => "vanilla",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn ablation(self) -> Ablation {
        let (c, m, k) = match self {
            Preset::All3 => (true, true, true),
            Preset::NoCuriosity => (false, true, true),
            Preset::NoMultiCriteria => (true, false, true),
            Preset::NoCurriculum => (true, true, false),
            Preset::CurriculumOnly => (false, false, true),
            Preset::Vanilla => (false, false, false),
        };
        Ablation {
            use_curiosity: c,
            use_multi_criteria: m,
            use_curriculum: k,
            use_her: true,
        }
    }
}

/// Environment keys; everything but `n_blocks` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub n_blocks: usize,
    #[serde(default = "default_reward_mode")]
    pub reward_mode: RewardMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Defaults to `50 * n_blocks`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_bounds: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_gripper_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claw_depth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub air_target_prob: Option<f64>,
}

fn default_reward_mode() -> RewardMode {
    RewardMode::Incremental
}

impl EnvSection {
    pub fn new(n_blocks: usize, reward_mode: RewardMode) -> Self {
        Self {
            n_blocks,
            reward_mode,
            tolerance: None,
            horizon: None,
            table_bounds: None,
            block_size: None,
            max_gripper_speed: None,
            claw_depth: None,
            air_target_prob: None,
        }
    }

    pub fn to_env_config(&self, seed: u64) -> EnvConfig {
        let mut c = EnvConfig::new(self.n_blocks);
        c.reward_mode = self.reward_mode;
        c.seed = seed;
        if let Some(v) = self.tolerance {
            c.tolerance = v;
        }
        if let Some(v) = self.horizon {
            c.horizon = v;
        }
        if let Some(v) = self.table_bounds {
            c.table_bounds = v;
        }
        if let Some(v) = self.block_size {
            c.block_size = v;
        }
        if let Some(v) = self.max_gripper_speed {
            c.max_gripper_speed = v;
        }
        if let Some(v) = self.claw_depth {
            c.claw_depth = v;
        }
        if let Some(v) = self.air_target_prob {
            c.air_target_prob = v;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HerSection {
    /// Probability of replacing a goal (standard) or each criterion (multi-criteria).
    pub augment_prob: f64,
}

impl Default for HerSection {
    fn default() -> Self {
        Self {
            augment_prob: crate::replay::DEFAULT_AUGMENT_PROB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub thresholds: [f64; 2],
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self {
            thresholds: CurriculumSchedule::default().thresholds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablation: Ablation,
    pub env: EnvSection,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub her: HerSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Worker counts used for each task in the reference experiments.
pub fn reference_workers(n_blocks: usize, mode: RewardMode) -> usize {
    match (n_blocks, mode) {
        (2, _) => 8,
        (3, RewardMode::Binary) => 32,
        (3, RewardMode::Incremental) => 8,
        (4, _) => 32,
        _ => 2,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset, n_blocks: usize, reward_mode: RewardMode) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from(format!(
                "runs/{}_stack{}_{}",
                preset.name(),
                n_blocks,
                match reward_mode {
                    RewardMode::Binary => "binary",
                    RewardMode::Incremental => "incremental",
                }
            )),
            ablation: preset.ablation(),
            env: EnvSection::new(n_blocks, reward_mode),
            agent: AgentConfig::default(),
            train: TrainConfig {
                n_workers: reference_workers(n_blocks, reward_mode),
                ..TrainConfig::default()
            },
            her: HerSection::default(),
            curriculum: CurriculumSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn her_mode(&self) -> HerMode {
        match (self.ablation.use_her, self.ablation.use_multi_criteria) {
            (false, _) => HerMode::None,
            (true, true) => HerMode::MultiCriteria,
            (true, false) => HerMode::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(0.0..=1.0).contains(&self.her.augment_prob) {
            return Err(Error::Config("her.augment_prob: must lie in [0, 1]".into()));
        }
        self.env.to_env_config(0).validate()?;
        self.agent.validate()?;
        self.train.validate()?;
        self.curriculum_schedule().validate()
    }

    pub fn curriculum_schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            enabled: self.ablation.use_curriculum,
            thresholds: self.curriculum.thresholds,
        }
    }

    pub fn trainer_setup(&self) -> Result<TrainerSetup> {
        self.validate()?;
        Ok(TrainerSetup {
            env: self.env.to_env_config(self.seed),
            agent: self.agent.clone(),
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            her: HerConfig {
                mode: self.her_mode(),
                augment_prob: self.her.augment_prob,
            },
            curriculum: self.curriculum_schedule(),
            use_curiosity: self.ablation.use_curiosity,
        })
    }
}
