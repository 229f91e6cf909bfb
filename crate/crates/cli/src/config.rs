//! Run configuration: one TOML document, every field defaulted, with
//! command-line overrides applied on top.

use std::path::Path;

use scenegen::causal::RankingMode;
use scenegen::closedloop::LoopConfig;
use scenegen::datagen::{DatasetConfig, Split};
use scenegen::denoiser::Architecture;
use scenegen::diffusion::{MaskMode, NoiseSchedule, SamplerConfig, ScheduleKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            diffusion_steps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl ModelConfig {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.schedule, self.diffusion_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset split used by `generate` and `evaluate`.
    pub split: Split,
    /// Use only the first `scenes` scenes of the split; 0 means all.
    pub scenes: usize,
    /// Exponent of the generational distances.
    pub gd_q: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            scenes: 0,
            gd_q: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never affects outputs.
    pub workers: usize,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub closed_loop: LoopConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            closed_loop: LoopConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub ranking: Option<RankingMode>,
    pub mask: Option<MaskMode>,
    pub guidance_scale: Option<f64>,
    pub nc: Option<usize>,
    pub replan_period: Option<usize>,
    pub no_guidance_masking: bool,
}

impl RunConfig {
    /// Parse a TOML config, or take the config embedded in a run manifest
    /// when the file has a `.json` extension.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            return Ok(m.config);
        }
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(r) = o.ranking {
            self.sampler.ranking = r;
        }
        if let Some(m) = o.mask {
            self.sampler.mask = m;
        }
        if let Some(w) = o.guidance_scale {
            self.sampler.w = w;
        }
        if let Some(n) = o.nc {
            self.sampler.n_c = n;
        }
        if let Some(r) = o.replan_period {
            self.closed_loop.replan_steps = r;
        }
        if o.no_guidance_masking {
            self.sampler.guidance_masking = false;
        }
    }

    /// Checks that do not depend on a particular scene.
    pub fn check(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.arch.check().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.diffusion_steps == 0 {
            return bad("model.diffusion_steps must be positive".into());
        }
        self.train.check().map_err(|m| CliError::Config(format!("train: {m}")))?;
        self.sampler.check(usize::MAX).map_err(|m| CliError::Config(format!("sampler: {m}")))?;
        let lc = &self.closed_loop;
        if lc.replan_steps == 0 || lc.replan_steps > self.model.arch.horizon {
            return bad(format!(
                "closed_loop.replan_steps must be in [1, {}], got {}",
                self.model.arch.horizon, lc.replan_steps
            ));
        }
        if lc.history_len != self.model.arch.history_len {
            return bad(format!(
                "closed_loop.history_len {} differs from model.arch.history_len {}",
                lc.history_len, self.model.arch.history_len
            ));
        }
        let d = &self.data;
        if d.layouts.is_empty() || d.agents[0] > d.agents[1] {
            return bad("data.layouts must be non-empty and data.agents a [min, max] range".into());
        }
        if d.scene.history_steps < self.model.arch.history_len {
            return bad("data.scene.history_steps is shorter than the model history".into());
        }
        if !(self.eval.gd_q >= 1.0) {
            return bad("eval.gd_q must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with `workers` cleared since it
    /// cannot change any output.
    pub fn hash(&self) -> String {
        let canonical = Self {
            workers: 0,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
