use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::numerics::AdamWConfig;
use crate::planner::{PlanLimits, PlannerConfig};
use crate::storyworld::{CorpusSizes, WorldConfig};

/// Optimizer step budget for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub steps: usize,
    /// Stories per step.
    pub batch: usize,
    /// Peak learning rate; linear warmup over the first 5% of steps, then
    /// cosine decay to 10% of the peak.
    pub lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { steps: 300, batch: 8, lr: 3e-3 }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.steps / 20).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (0.1 + 0.9 * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Decay factor `λ` of the pooling windows.
    pub lambda: usize,
    /// History depth `T`; 0 disables the memory bank.
    pub history_depth: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { lambda: 2, history_depth: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test stories rolled out per evaluation (at most the test split size).
    pub stories: usize,
    /// Euler steps at sampling time.
    pub n_steps: usize,
    pub limits: PlanLimits,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stories: 48, n_steps: 12, limits: PlanLimits::default() }
    }
}

/// Full run configuration. Every field has a default, so an empty file is a
/// valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusSizes,
    /// Vocabulary, instruction and input sizes are taken from `world`.
    pub planner: PlannerConfig,
    /// Latent and conditioning shapes are taken from `world`.
    pub generator: GeneratorConfig,
    pub memory: MemoryConfig,
    pub optimizer: AdamWConfig,
    /// Caption-conditioned generator pretraining, run before stage 1.
    pub pretrain: Schedule,
    pub stage1: Schedule,
    pub stage2: Schedule,
    pub stage3: Schedule,
    /// Fill the stage-3 memory bank with the model's own samples instead of
    /// ground-truth frames.
    pub stage3_self_rollout: bool,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            corpus: CorpusSizes::default(),
            planner: PlannerConfig::default(),
            generator: GeneratorConfig::default(),
            memory: MemoryConfig::default(),
            optimizer: AdamWConfig::default(),
            pretrain: Schedule { steps: 2000, batch: 8, lr: 1e-2 },
            stage1: Schedule { steps: 400, batch: 8, lr: 1e-2 },
            stage2: Schedule { steps: 1000, batch: 4, lr: 1e-2 },
            stage3: Schedule { steps: 3000, batch: 4, lr: 5e-3 },
            stage3_self_rollout: false,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copies shapes implied by the world into the model configs and checks
    /// cross-module consistency.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let w = &c.world;
        c.planner.vocab_size = w.vocab_size();
        c.planner.instruction_vocab = w.instruction_vocab();
        c.planner.input_channels = w.channels;
        c.generator.latent_rows = w.rows;
        c.generator.latent_channels = w.channels;
        c.generator.cond_channels = w.channels;
        c.generator.max_part_rows =
            c.generator.max_part_rows.max(w.rows).max(w.caption_rows).max(c.planner.m_queries);
        c.generator.max_lag = c.generator.max_lag.max(c.memory.history_depth);
        if c.memory.lambda < 2 {
            return Err(Error::DecayFactor(c.memory.lambda));
        }
        if c.eval.n_steps == 0 {
            return Err(Error::InvalidArgument("eval.n_steps must be positive".into()));
        }
        c.planner.validate()?;
        c.generator.validate()?;
        Ok(c)
    }
}
