use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continual-learning strategy for the diffusion model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Finetune,
    Joint,
    GenerativeReplay,
    GenerativeDistillation,
    LwfDistill,
    GaussianDistill,
    ExperienceReplay,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Joint,
        Strategy::Finetune,
        Strategy::GenerativeReplay,
        Strategy::GenerativeDistillation,
        Strategy::LwfDistill,
        Strategy::GaussianDistill,
        Strategy::ExperienceReplay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Joint => "joint",
            Strategy::GenerativeReplay => "generative_replay",
            Strategy::GenerativeDistillation => "generative_distillation",
            Strategy::LwfDistill => "lwf_distill",
            Strategy::GaussianDistill => "gaussian_distill",
            Strategy::ExperienceReplay => "experience_replay",
        }
    }

    /// Strategies that weight a past-task term by λ.
    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            Strategy::GenerativeDistillation | Strategy::LwfDistill | Strategy::GaussianDistill
        )
    }

    /// Strategies that read from a frozen previous-task model.
    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            Strategy::GenerativeReplay
                | Strategy::GenerativeDistillation
                | Strategy::LwfDistill
                | Strategy::GaussianDistill
        )
    }

    /// Strategies that interleave a separate replay minibatch.
    pub fn replays_batch(self) -> bool {
        matches!(
            self,
            Strategy::GenerativeReplay
                | Strategy::GenerativeDistillation
                | Strategy::GaussianDistill
                | Strategy::ExperienceReplay
        )
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Strategy::GenerativeDistillation => 0.75,
            Strategy::LwfDistill => 1.25,
            Strategy::GaussianDistill => 8.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let found = match norm.as_str() {
            "gr" => Some(Strategy::GenerativeReplay),
            "gd" => Some(Strategy::GenerativeDistillation),
            "lwf" => Some(Strategy::LwfDistill),
            "er" => Some(Strategy::ExperienceReplay),
            "naive" => Some(Strategy::Finetune),
            _ => Strategy::ALL.into_iter().find(|st| st.name() == norm),
        };
        found.ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name().to_string()
    }
}

/// Hyperparameters of one strategy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// DDIM steps the teacher uses to generate replay samples.
    pub teacher_steps: usize,
    /// Weight λ of the distillation term.
    pub lambda: f64,
    /// Total experience-replay memory, in samples.
    pub buffer_capacity: usize,
    pub epochs_per_task: usize,
    pub batch_size_current: usize,
    pub batch_size_replay: usize,
    pub learning_rate: f64,
    /// Generate one replay pool per task instead of fresh samples every step.
    pub cache_replay: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::for_strategy(Strategy::GenerativeDistillation)
    }
}

impl StrategyConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            teacher_steps: 2,
            lambda: strategy.default_lambda(),
            buffer_capacity: 100,
            epochs_per_task: 50,
            batch_size_current: 64,
            batch_size_replay: 64,
            learning_rate: 1e-3,
            cache_replay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_steps < 1 {
            return Err(Error::Config("teacher_steps must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.epochs_per_task < 1 || self.batch_size_current < 1 || self.batch_size_replay < 1 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if self.strategy.replays_batch() && self.batch_size_replay != self.batch_size_current {
            return Err(Error::Config(
                "replay strategies replay as many samples as the current batch holds".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}
