//! Experiment configuration: a TOML tree with defaults for every key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::score_agent::ScoreTarget;
use crate::synthetic_pose::{tier, GeneratorConfig, PoseNetConfig, TIERS};
use crate::vpsde::{NoiseSchedule, ScheduleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Plain,
    KdOnly,
    #[serde(rename = "agentpose")]
    AgentPose,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::KdOnly => "kd-only",
            Mode::AgentPose => "agentpose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub keypoints: usize,
    pub grid: usize,
    pub bins: usize,
    pub label_sigma: f64,
    pub blob_width: f64,
    pub distractors: usize,
    pub distractor_amplitude: f64,
    pub distractor_width: [f64; 2],
    pub pixel_noise: f64,
    pub visibility: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            n_train: 5000,
            n_val: 1000,
            keypoints: 4,
            grid: 16,
            bins: 32,
            label_sigma: 1.0,
            blob_width: 1.0,
            distractors: 2,
            distractor_amplitude: 0.6,
            distractor_width: [0.8, 1.6],
            pixel_noise: 0.05,
            visibility: 0.9,
        }
    }
}

impl DataSection {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            keypoints: self.keypoints,
            grid: self.grid,
            blob_width: self.blob_width,
            distractors: self.distractors,
            distractor_amplitude: self.distractor_amplitude,
            distractor_width: self.distractor_width,
            pixel_noise: self.pixel_noise,
            visibility: self.visibility,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub tier: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub cosine_decay: bool,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            tier: "l".into(),
            epochs: 100,
            lr: 3e-3,
            batch_size: 128,
            weight_decay: 1e-4,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub tier: String,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            tier: "t".into(),
            lr: 3e-3,
            batch_size: 128,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_gain: f64,
    pub spatial: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_gain: 10.0,
            spatial: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mode: ScheduleMode,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let m = NoiseSchedule::default().meta();
        ScheduleSection {
            n_steps: m.n_steps,
            beta_min: m.beta_min,
            beta_max: m.beta_max,
            mode: m.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub t_s: f64,
    pub n_infer_steps: usize,
    pub score_target: ScoreTarget,
    /// Bottleneck width; defaults to a quarter of the latent width.
    pub hidden: Option<usize>,
    pub embed_dim: usize,
    pub lr: f64,
    /// Noise injection during training forward passes.
    pub stochastic_train: bool,
    /// Noise injection at evaluation.
    pub stochastic_eval: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            t_s: 0.4,
            n_infer_steps: 5,
            score_target: ScoreTarget::Consistent,
            hidden: None,
            embed_dim: 16,
            lr: 3e-3,
            stochastic_train: true,
            stochastic_eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    /// Latent width; defaults to half the teacher's channels.
    pub latent_dim: Option<usize>,
    pub lr: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            latent_dim: None,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub mode: Mode,
    pub e_max: usize,
    /// Epochs of autoencoder + agent training on teacher features before
    /// the joint phase.
    pub pretrain_epochs: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            mode: Mode::AgentPose,
            e_max: 60,
            pretrain_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub taus: Vec<f64>,
    /// Rows per side used for energy distances.
    pub energy_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            taus: vec![0.05, 0.1, 0.2],
            energy_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub agent: AgentSection,
    pub autoencoder: AutoencoderSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be at least 1"))
    }
}

fn tier_rank(field: &str, name: &str) -> Result<usize> {
    TIERS
        .iter()
        .position(|t| *t == name)
        .ok_or_else(|| Error::config(field, format!("unknown tier `{name}`, expected one of {TIERS:?}")))
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and type errors name the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.message()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        nonzero("data.n_train", d.n_train)?;
        nonzero("data.n_val", d.n_val)?;
        nonzero("data.keypoints", d.keypoints)?;
        if d.grid < 2 {
            return Err(Error::config("data.grid", "must be at least 2"));
        }
        if d.bins < d.grid {
            return Err(Error::config("data.bins", format!("must be ≥ data.grid ({})", d.grid)));
        }
        if !(d.label_sigma >= 0.0) {
            return Err(Error::config("data.label_sigma", "must be ≥ 0"));
        }
        positive("data.blob_width", d.blob_width)?;
        if !(0.0..=1.0).contains(&d.visibility) {
            return Err(Error::config("data.visibility", "must lie in [0, 1]"));
        }
        d.generator()
            .validate()
            .map_err(|e| Error::config("data", e))?;

        let t_rank = tier_rank("teacher.tier", &self.teacher.tier)?;
        let s_rank = tier_rank("student.tier", &self.student.tier)?;
        if s_rank >= t_rank {
            return Err(Error::config(
                "student.tier",
                format!("student tier must be smaller than teacher tier `{}`", self.teacher.tier),
            ));
        }
        nonzero("teacher.epochs", self.teacher.epochs)?;
        positive("teacher.lr", self.teacher.lr)?;
        nonzero("teacher.batch_size", self.teacher.batch_size)?;
        positive("student.lr", self.student.lr)?;
        nonzero("student.batch_size", self.student.batch_size)?;
        positive("model.feature_gain", self.model.feature_gain)?;
        nonzero("model.spatial", self.model.spatial)?;

        let s = &self.schedule;
        NoiseSchedule::new(s.n_steps, s.beta_min, s.beta_max, s.mode).map_err(|e| Error::config("schedule", e))?;

        let a = &self.agent;
        if !(a.t_s > 0.0 && a.t_s <= 1.0) {
            return Err(Error::config("agent.t_s", format!("must lie in (0, 1], got {}", a.t_s)));
        }
        nonzero("agent.n_infer_steps", a.n_infer_steps)?;
        if let Some(h) = a.hidden {
            nonzero("agent.hidden", h)?;
        }
        if a.embed_dim < 2 || !a.embed_dim.is_multiple_of(2) {
            return Err(Error::config("agent.embed_dim", "must be even and at least 2"));
        }
        positive("agent.lr", a.lr)?;

        let c_tea = self.teacher_channels();
        if let Some(dim) = self.autoencoder.latent_dim {
            if dim == 0 || dim > c_tea {
                return Err(Error::config(
                    "autoencoder.latent_dim",
                    format!("must lie in 1..={c_tea}, got {dim}"),
                ));
            }
        }
        positive("autoencoder.lr", self.autoencoder.lr)?;
        nonzero("distill.e_max", self.distill.e_max)?;
        if self.eval.taus.is_empty() {
            return Err(Error::config("eval.taus", "needs at least one threshold"));
        }
        for (i, &t) in self.eval.taus.iter().enumerate() {
            positive(&format!("eval.taus[{i}]"), t)?;
        }
        nonzero("eval.energy_samples", self.eval.energy_samples)?;
        Ok(())
    }

    pub fn teacher_channels(&self) -> usize {
        tier(&self.teacher.tier).map_or(0, |(_, c)| c)
    }

    pub fn latent_dim(&self) -> usize {
        self.autoencoder
            .latent_dim
            .unwrap_or_else(|| (self.teacher_channels() / 2).max(1))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.n_steps, s.beta_min, s.beta_max, s.mode)
    }

    fn net_config(&self, tier_name: &str) -> Result<PoseNetConfig> {
        let d = &self.data;
        let mut c = PoseNetConfig::from_tier(tier_name, d.grid, d.keypoints, d.bins)?;
        c.feature_gain = self.model.feature_gain;
        c.spatial = self.model.spatial;
        Ok(c)
    }

    pub fn teacher_net(&self) -> Result<PoseNetConfig> {
        self.net_config(&self.teacher.tier)
    }

    pub fn student_net(&self) -> Result<PoseNetConfig> {
        self.net_config(&self.student.tier)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
