//! Run configuration, read from and written to TOML.
//!
//! Three presets exist. `desk` is the documented default scale, `acceptance`
//! is a narrower model used by the acceptance suite so that all variant
//! trainings fit the time budget on one core, and `tiny` drives fast tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action_expert::ActionExpertConfig;
use crate::error::{LampError, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::motion_expert::MotionExpertConfig;
use crate::motionrep::GridSpec;
use crate::percept::PerceptConfig;
use crate::toyworld::{DataConfig, TaskKind};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Cosine floor as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl OptimConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = self.batch > 0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio)
            && self.clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(LampError::config(format!("invalid optimizer settings for {what}: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    #[serde(flatten)]
    pub optim: OptimConfig,
    /// Train on depth-masked flow (the 2D ablation).
    pub depth_mask: bool,
    /// Motion flow times τ ~ Beta(alpha, beta); beta > 1 favors the noise end.
    pub flow_time_alpha: f64,
    pub flow_time_beta: f64,
    /// Episodes withheld from training for evaluation.
    pub holdout_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    #[serde(flatten)]
    pub optim: OptimConfig,
    /// Euler steps N for both experts; t₁ = 1/N.
    pub solver_steps: usize,
    pub flow_time_alpha: f64,
    pub flow_time_beta: f64,
    /// Frozen-parameter hashes are compared every this many steps.
    pub freeze_check_every: usize,
    pub holdout_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    /// One evaluation seed set per entry; episodes are paired across variants.
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub tasks: Vec<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LampConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub percept: PerceptConfig,
    pub motion: MotionExpertConfig,
    pub guidance: GuidanceConfig,
    pub action: ActionExpertConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for LampConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LampConfig {
    /// Desk-scale defaults: d_m = 64 with 4 layers, d_z = 64, batch 32, 2k steps per stage.
    pub fn desk() -> Self {
        let optim = |lr: f64| OptimConfig {
            steps: 2000,
            batch: 32,
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            min_lr_ratio: 0.1,
            clip: 1.0,
        };
        LampConfig {
            seed: 0,
            data: DataConfig::default(),
            percept: PerceptConfig::default(),
            motion: MotionExpertConfig::default(),
            guidance: GuidanceConfig::default(),
            action: ActionExpertConfig::default(),
            stage1: Stage1Config {
                optim: optim(1e-3),
                depth_mask: false,
                flow_time_alpha: 1.0,
                flow_time_beta: 3.0,
                holdout_episodes: 24,
            },
            stage2: Stage2Config {
                optim: optim(1e-3),
                solver_steps: 10,
                flow_time_alpha: 1.5,
                flow_time_beta: 1.0,
                freeze_check_every: 100,
                holdout_episodes: 24,
            },
            eval: EvalConfig {
                episodes_per_task: 100,
                seeds: vec![1, 2, 3],
                max_steps: 60,
                tasks: TaskKind::ALL.to_vec(),
            },
        }
    }

    /// Narrower networks and batch 16 so that two Stage-1 and five Stage-2
    /// trainings plus all evaluations fit in the acceptance budget.
    pub fn acceptance() -> Self {
        let mut c = Self::desk();
        c.motion = MotionExpertConfig {
            width: 32,
            layers: 2,
            heads: 4,
            time_dim: 32,
            mlp_ratio: 2,
        };
        c.stage1.optim.batch = 16;
        c.stage2.optim.batch = 16;
        c
    }

    /// Seconds-scale configuration for tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.data.episodes = 6;
        c.data.grid = GridSpec {
            rows: 4,
            cols: 4,
            horizon: 4,
            image_width: 16,
            image_height: 16,
        };
        c.data.record_stride = 4;
        c.percept = PerceptConfig {
            width: 16,
            layers: 1,
            heads: 2,
            patch: 8,
            mlp_ratio: 2,
        };
        c.motion = MotionExpertConfig {
            width: 16,
            layers: 1,
            heads: 2,
            time_dim: 8,
            mlp_ratio: 2,
        };
        c.guidance.heads = 2;
        c.action = ActionExpertConfig {
            width: 16,
            layers: 1,
            heads: 2,
            time_dim: 8,
            mlp_ratio: 2,
            horizon: 4,
        };
        for o in [&mut c.stage1.optim, &mut c.stage2.optim] {
            o.steps = 5;
            o.batch = 4;
        }
        c.stage1.holdout_episodes = 1;
        c.stage2.holdout_episodes = 1;
        c.stage2.freeze_check_every = 2;
        c.eval = EvalConfig {
            episodes_per_task: 1,
            seeds: vec![1],
            max_steps: 8,
            tasks: TaskKind::ALL.to_vec(),
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "acceptance" => Ok(Self::acceptance()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(LampError::config(format!("unknown preset '{name}' (desk, acceptance, tiny)"))),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.data.grid
    }

    pub fn with_mode(mut self, mode: GuidanceMode) -> Self {
        self.guidance.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.motion.validate()?;
        self.action.validate()?;
        self.stage1.optim.validate("stage1")?;
        self.stage2.optim.validate("stage2")?;
        if self.action.horizon != self.data.action_horizon {
            return Err(LampError::config(format!(
                "action horizon {} differs from the dataset chunk length {}",
                self.action.horizon, self.data.action_horizon
            )));
        }
        if self.stage2.solver_steps == 0 {
            return Err(LampError::config("stage2.solver_steps must be positive"));
        }
        if [self.stage1.flow_time_alpha, self.stage1.flow_time_beta, self.stage2.flow_time_alpha, self.stage2.flow_time_beta]
            .iter()
            .any(|&x| !(x > 0.0))
        {
            return Err(LampError::config("flow-time sampler parameters must be positive"));
        }
        if self.eval.seeds.is_empty() || self.eval.tasks.is_empty() {
            return Err(LampError::config("eval needs at least one seed and one task"));
        }
        let g = self.grid();
        if g.image_width % self.percept.patch != 0 || g.image_height % self.percept.patch != 0 {
            return Err(LampError::config(format!(
                "percept patch {} must divide the {}x{} image",
                self.percept.patch, g.image_width, g.image_height
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LampError::format(format!("config serialization: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: LampConfig = toml::from_str(s).map_err(|e| LampError::config(format!("config parse: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Content hash of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "acceptance", "tiny"] {
            let c = LampConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = LampConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn hash_distinguishes_mode() {
        let a = LampConfig::tiny();
        let b = a.clone().with_mode(GuidanceMode::None);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let mut c = LampConfig::tiny();
        c.action.horizon = 3;
        assert!(c.validate().is_err());
    }
}
