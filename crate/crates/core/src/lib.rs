//! Continual learning for diffusion models: DDPM/DDIM machinery, an
//! ε-prediction denoiser, continual-learning strategies (replay,
//! distillation, buffers), a replay-trained classifier, evaluation metrics
//! and an experiment harness.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod strategies;
pub mod tasks;

pub use checkpoint::{Checkpoint, ModelDescriptor};
pub use classifier::{Classifier, ClassifierDescriptor, ClassifierReplayConfig};
pub use denoiser::{Denoiser, DenoiserDescriptor, EpsNetwork, LossGrad, MlpEps, Mode};
pub use diffusion::{NoisySample, SamplerConfig, SigmaPolicy, VarianceSchedule};
pub use error::{Error, Result};
pub use harness::{DatasetDescriptor, ExperimentOutcome, Manifest, MetricsRow, RunConfig};
pub use metrics::{EvalRecord, FeatureStats, Labeler, LabelerConfig};
pub use rng::{Rng, Stream};
pub use strategies::{ReplayBuffer, Strategy, StrategyConfig, TaskLog};
pub use tasks::{LabeledSet, Task, TaskSequence};
