use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Temperature;
use crate::model::{LoraRank, RealFlowPolicy};

/// Cosine annealing with warm restarts. Cycle `i` lasts `t0 · t_mult^i` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub eta_min: f64,
    pub t0: usize,
    pub t_mult: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eta_min: 0.0,
            t0: 200,
            t_mult: 2,
        }
    }
}

/// Learning rate at `step`. The step that completes a cycle starts the next
/// one at `eta_max`.
pub fn lr_at(step: usize, schedule: &Schedule, eta_max: f64) -> f64 {
    let mut t = step;
    let mut len = schedule.t0.max(1);
    while t >= len {
        t -= len;
        len = len.saturating_mul(schedule.t_mult.max(1));
    }
    let cos = (PI * t as f64 / len as f64).cos();
    schedule.eta_min + 0.5 * (eta_max - schedule.eta_min) * (1.0 + cos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSteps {
    pub pretrain: usize,
    pub align: usize,
    pub downstream: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub temperature: Temperature,
    pub lora_rank: LoraRank,
    /// Adapter scale numerator; `None` means `alpha = rank` (scale 1).
    pub lora_alpha: Option<f64>,
    pub clip_max_norm: f64,
    pub schedule: Schedule,
    pub steps: PhaseSteps,
    pub seed: u64,
    pub real_flow_policy: RealFlowPolicy,
    pub symmetric_align: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

impl TrainConfig {
    /// Hyperparameters as published, with 50k steps per phase.
    pub fn paper_defaults() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            temperature: Temperature::DEFAULT,
            lora_rank: LoraRank::Rank(4),
            lora_alpha: None,
            clip_max_norm: 1.0,
            schedule: Schedule {
                eta_min: 0.0,
                t0: 10_000,
                t_mult: 2,
            },
            steps: PhaseSteps {
                pretrain: 50_000,
                align: 50_000,
                downstream: 50_000,
            },
            seed: 0,
            real_flow_policy: RealFlowPolicy::FrozenBase,
            symmetric_align: false,
            hidden_dim: 128,
            embed_dim: 32,
            log_interval: 50,
        }
    }

    /// Scaled-down profile that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            schedule: Schedule {
                eta_min: 0.0,
                t0: 200,
                t_mult: 2,
            },
            steps: PhaseSteps {
                pretrain: 500,
                align: 1000,
                downstream: 300,
            },
            ..Self::paper_defaults()
        }
    }

    pub fn alpha(&self) -> f64 {
        match (self.lora_alpha, self.lora_rank) {
            (Some(a), _) => a,
            (None, LoraRank::Rank(r)) => r as f64,
            (None, LoraRank::Full) => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_max_norm", self.clip_max_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for contrastive phases, got {}",
                self.batch_size
            )));
        }
        if self.lora_rank == LoraRank::Rank(0) {
            return Err(Error::Config("lora_rank must be >= 1 or \"full\"".into()));
        }
        if let Some(a) = self.lora_alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Config("lora_alpha must be > 0".into()));
            }
        }
        if self.schedule.t0 == 0 || self.schedule.t_mult == 0 {
            return Err(Error::Config("schedule t0 and t_mult must be >= 1".into()));
        }
        if !(self.schedule.eta_min >= 0.0 && self.schedule.eta_min <= self.lr) {
            return Err(Error::Config("schedule eta_min must lie in [0, lr]".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("hidden_dim and embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}
