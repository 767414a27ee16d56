//! Run configuration.
//!
//! A flat key/value file where every key carries its section prefix:
//!
//! ```text
//! # comments start with '#'
//! model.hidden_width = 128
//! distill.rank = 8
//! distill.guidance_s = 3.0
//! ```
//!
//! The syntax is the dotted-key subset of TOML. Every key is optional and
//! falls back to its default; unknown keys are errors.

use std::path::Path;

use guided_lora_core::datagen::{default_gmm, GmmSpec};
use guided_lora_core::denoiser::DenoiserConfig;
use guided_lora_core::diffusion::{make_schedule, NoiseSchedule};
use guided_lora_core::distill::{DistillConfig, LrDecay, TeacherTrainConfig};
use guided_lora_core::lora::LayerFilter;
use guided_lora_core::memacct::FootprintModel;
use guided_lora_core::numerics::AdamConfig;
use serde::Deserialize;

use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            hidden_width: d.hidden_width,
            num_blocks: d.num_blocks,
            time_embed_dim: d.time_embed_dim,
            cond_embed_dim: d.cond_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Only `"default"` (four classes at `(+-2, +-2)`, covariance `0.1 I`).
    pub gmm: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            gmm: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        use guided_lora_core::diffusion::{DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
        Self {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub steps: usize,
    pub batch_size: usize,
    pub p_uncond: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let d = TeacherTrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            p_uncond: d.p_uncond,
            lr: d.adam.lr,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub guidance_s: f64,
    pub rank: usize,
    pub alpha: f64,
    /// `"admits-rank"`, `"all"`, or a list of layer names.
    pub layers: LayerSelection,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `"cosine"` or `"constant"`.
    pub lr_decay: String,
    pub seed: u64,
    pub eval_every: usize,
    pub probe_size: usize,
    pub probe_seed: u64,
    /// When set, the teacher checkpoint's hash must equal this.
    pub teacher_hash: Option<String>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            guidance_s: d.guidance_s,
            rank: d.rank,
            alpha: d.alpha,
            layers: LayerSelection::Keyword("admits-rank".into()),
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_decay: "cosine".into(),
            seed: d.seed,
            eval_every: d.eval_every,
            probe_size: d.probe_size,
            probe_seed: d.probe_seed,
            teacher_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Keyword(String),
    Names(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub bytes_per_param: f64,
    pub optimizer_state_multiplier: f64,
    pub gradient_multiplier: f64,
}

impl Default for MemorySection {
    fn default() -> Self {
        let d = FootprintModel::default();
        Self {
            bytes_per_param: d.bytes_per_param,
            optimizer_state_multiplier: d.optimizer_state_multiplier,
            gradient_multiplier: d.gradient_multiplier,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub memory: MemorySection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config {
            path: path.to_path_buf(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text).map_err(|message| LabError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parses and validates config text. Errors carry line and key.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.gmm()?;
        self.denoiser()
            .validate()
            .map_err(|e| format!("model: {e}"))?;
        self.schedule().map_err(|e| format!("schedule: {e}"))?;
        self.layer_filter()?;
        self.lr_decay()?;
        self.footprint()
            .validate()
            .map_err(|e| format!("memory: {e}"))?;
        Ok(())
    }

    pub fn gmm(&self) -> std::result::Result<GmmSpec, String> {
        match self.data.gmm.as_str() {
            "default" => Ok(default_gmm()),
            other => Err(format!(
                "data.gmm: unknown mixture `{other}` (only \"default\")"
            )),
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let classes = self.gmm().map(|g| g.classes()).unwrap_or(0);
        DenoiserConfig {
            data_dim: 2,
            hidden_width: self.model.hidden_width,
            num_blocks: self.model.num_blocks,
            time_embed_dim: self.model.time_embed_dim,
            cond_embed_dim: self.model.cond_embed_dim,
            num_classes: classes,
            timesteps: self.schedule.steps,
        }
    }

    pub fn schedule(&self) -> guided_lora_core::Result<NoiseSchedule> {
        make_schedule(
            self.schedule.steps,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn teacher_train(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            steps: self.teacher.steps,
            batch_size: self.teacher.batch_size,
            p_uncond: self.teacher.p_uncond,
            adam: AdamConfig {
                lr: self.teacher.lr,
                ..AdamConfig::default()
            },
            seed: self.teacher.seed,
        }
    }

    pub fn layer_filter(&self) -> std::result::Result<LayerFilter, String> {
        match &self.distill.layers {
            LayerSelection::Keyword(k) if k == "admits-rank" => Ok(LayerFilter::AdmitsRank),
            LayerSelection::Keyword(k) if k == "all" => Ok(LayerFilter::All),
            LayerSelection::Keyword(k) => Err(format!(
                "distill.layers: expected \"admits-rank\", \"all\" or a list of names, got `{k}`"
            )),
            LayerSelection::Names(n) => Ok(LayerFilter::Named(n.clone())),
        }
    }

    pub fn lr_decay(&self) -> std::result::Result<LrDecay, String> {
        match self.distill.lr_decay.as_str() {
            "cosine" => Ok(LrDecay::Cosine),
            "constant" => Ok(LrDecay::Constant),
            other => Err(format!(
                "distill.lr_decay: expected \"cosine\" or \"constant\", got `{other}`"
            )),
        }
    }

    pub fn distill(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            guidance_s: d.guidance_s,
            rank: d.rank,
            alpha: d.alpha,
            filter: self.layer_filter().unwrap_or_default(),
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_decay: self.lr_decay().unwrap_or(LrDecay::Cosine),
            seed: d.seed,
            eval_every: d.eval_every,
            probe_size: d.probe_size,
            probe_seed: d.probe_seed,
        }
    }

    pub fn footprint(&self) -> FootprintModel {
        FootprintModel {
            bytes_per_param: self.memory.bytes_per_param,
            optimizer_state_multiplier: self.memory.optimizer_state_multiplier,
            gradient_multiplier: self.memory.gradient_multiplier,
            include_inference_only: false,
        }
    }
}
