//! Per-task training loops for every strategy and the task-sequence driver.
//!
//! Every loop draws its current-task minibatches from `TrainStreams::batches`
//! and the current-task (t, ε) from `TrainStreams::noise`; anything related
//! to past tasks comes from `TrainStreams::replay`. With the first two
//! streams shared, a strategy whose past term is absent or zero-weighted
//! follows the finetune trajectory.

use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::buffer::ReplayBuffer;
use super::config::{Strategy, StrategyConfig};
use super::losses::{
    distill_loss_grad, gaussian_distill_loss_grad, generate_replay, lwf_distill_loss_grad,
    loss_coefficients, renoise, replay_loss_grad, PastWeighting, ReplayBatch,
};
use crate::denoiser::{regression_loss_grad, Denoiser, EpsNetwork, LossGrad};
use crate::diffusion::{forward_sample, NoisySample, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{standard_normal, substream, uniform_timesteps, Rng, Stream};
use crate::tasks::{LabeledSet, TaskSequence};

/// Random streams consumed while training one task.
#[derive(Clone, Debug)]
pub struct TrainStreams {
    pub batches: Rng,
    pub noise: Rng,
    pub replay: Rng,
}

impl TrainStreams {
    pub fn for_task(master_seed: u64, task_index: usize) -> Self {
        let i = task_index as u64;
        Self {
            batches: substream(master_seed, Stream::Batches, i),
            noise: substream(master_seed, Stream::TrainNoise, i),
            replay: substream(master_seed, Stream::Replay, i),
        }
    }
}

/// Shuffled minibatches over `0..n`, reshuffled at the start of every pass.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize) -> Self {
        Self { order: (0..n).collect(), batch, pos: 0 }
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = if end >= self.order.len() { 0 } else { end };
        rows
    }
}

/// Summary of one task's optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLog {
    pub task_index: usize,
    pub strategy: Strategy,
    pub steps: usize,
    pub mean_current_loss: f64,
    pub mean_past_loss: Option<f64>,
}

/// Gradient steps for a task: epochs over D_i at the current batch size.
pub fn steps_per_task(cfg: &StrategyConfig, task_samples: usize) -> usize {
    cfg.epochs_per_task * task_samples.div_ceil(cfg.batch_size_current)
}

fn noisy_current(
    data: &Array2<f64>,
    rows: &[usize],
    schedule: &VarianceSchedule,
    noise: &mut Rng,
) -> Result<NoisySample> {
    let x0 = data.select(Axis(0), rows);
    let t = uniform_timesteps(noise, rows.len(), schedule.horizon());
    let eps = standard_normal(noise, rows.len(), data.ncols());
    forward_sample(x0.view(), &t, eps.view(), schedule)
}

struct Fit<'a> {
    data: &'a Array2<f64>,
    task_index: usize,
    strategy: Strategy,
    weighting: PastWeighting,
    batch: usize,
    steps: usize,
    learning_rate: f64,
}

/// Shared optimization loop. `past` returns the past-task loss for the
/// current step, or `None` when there is nothing to replay.
fn fit<N, P>(
    student: &mut Denoiser<N>,
    spec: Fit<'_>,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
    mut past: P,
) -> Result<TaskLog>
where
    N: EpsNetwork,
    P: FnMut(&Denoiser<N>, &NoisySample, &mut Rng) -> Result<Option<LossGrad>>,
{
    if student.is_frozen() {
        return Err(Error::Frozen);
    }
    if spec.data.nrows() == 0 {
        return Err(Error::Dataset(format!("task {} has no training samples", spec.task_index)));
    }
    let (w_current, w_past) = loss_coefficients(spec.task_index, spec.weighting)?;
    let mut adam = Adam::new(AdamConfig::with_lr(spec.learning_rate), student.num_params());
    let mut sampler = EpochSampler::new(spec.data.nrows(), spec.batch);
    let (mut sum_current, mut sum_past, mut n_past) = (0.0, 0.0, 0usize);
    for _ in 0..spec.steps {
        let rows = sampler.next_batch(&mut streams.batches);
        let current = noisy_current(spec.data, &rows, schedule, &mut streams.noise)?;
        let current_lg = regression_loss_grad(student, current.x_t.view(), &current.t, current.eps.view())?;
        sum_current += current_lg.value;
        let total = match past(student, &current, &mut streams.replay)? {
            Some(past_lg) => {
                sum_past += past_lg.value;
                n_past += 1;
                let mut total = LossGrad::zero(student.num_params());
                total.add_scaled(w_current, &current_lg);
                total.add_scaled(w_past, &past_lg);
                total
            }
            None => current_lg,
        };
        adam.step(student.params_mut()?, &total.grad);
    }
    Ok(TaskLog {
        task_index: spec.task_index,
        strategy: spec.strategy,
        steps: spec.steps,
        mean_current_loss: sum_current / spec.steps.max(1) as f64,
        mean_past_loss: (n_past > 0).then(|| sum_past / n_past as f64),
    })
}

fn base_fit<'a>(cfg: &StrategyConfig, data: &'a LabeledSet, task_index: usize, weighting: PastWeighting) -> Fit<'a> {
    Fit {
        data: &data.x,
        task_index,
        strategy: cfg.strategy,
        weighting,
        batch: cfg.batch_size_current,
        steps: steps_per_task(cfg, data.len()),
        learning_rate: cfg.learning_rate,
    }
}

fn require_teacher<N>(teacher: Option<&Denoiser<N>>, task_index: usize) -> Result<Option<&Denoiser<N>>> {
    match teacher {
        None if task_index > 1 => Err(Error::MissingTeacher(task_index)),
        _ if task_index == 1 => Ok(None),
        t => Ok(t),
    }
}

/// Where replayed clean samples come from: fresh teacher generations every
/// step, or a pool generated once at the start of the task.
enum ReplaySource<'a, N> {
    Fresh { teacher: &'a Denoiser<N>, steps: usize, batch: usize },
    Pool { pool: Array2<f64>, batch: usize },
}

impl<'a, N: EpsNetwork> ReplaySource<'a, N> {
    fn new(
        teacher: &'a Denoiser<N>,
        cfg: &StrategyConfig,
        pool_size: usize,
        schedule: &VarianceSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.cache_replay {
            let pool = generate_replay(teacher, cfg.teacher_steps, pool_size, schedule, rng)?;
            Ok(Self::Pool { pool, batch: cfg.batch_size_replay })
        } else {
            Ok(Self::Fresh { teacher, steps: cfg.teacher_steps, batch: cfg.batch_size_replay })
        }
    }

    fn next(&self, schedule: &VarianceSchedule, rng: &mut Rng) -> Result<ReplayBatch> {
        let generated = match self {
            Self::Fresh { teacher, steps, batch } => generate_replay(teacher, *steps, *batch, schedule, rng)?,
            Self::Pool { pool, batch } => {
                let rows: Vec<usize> =
                    (0..*batch).map(|_| rand::Rng::random_range(rng, 0..pool.nrows())).collect();
                pool.select(Axis(0), &rows)
            }
        };
        let noisy = renoise(generated.view(), schedule, rng)?;
        Ok(ReplayBatch { generated, noisy })
    }
}

/// Plain L_simple on the current task.
pub fn train_task_finetune<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Replay);
    fit(student, spec, schedule, streams, |_, _, _| Ok(None))
}

/// L_simple on the union of all tasks so far, continuing from the previous
/// model. After the first task the batch holds as many rows as a replay
/// strategy's combined batch; the step budget matches the other strategies.
pub fn train_task_joint<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    sequence: &TaskSequence,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let union = sequence.train_union(task_index);
    let mut spec = base_fit(cfg, &union, task_index, PastWeighting::Replay);
    spec.steps = steps_per_task(cfg, sequence.task(task_index).train.len());
    if task_index > 1 {
        spec.batch = cfg.batch_size_current + cfg.batch_size_replay;
    }
    fit(student, spec, schedule, streams, |_, _, _| Ok(None))
}

/// r·L_simple + (1−r)·L_replay with teacher samples regenerated every step.
pub fn train_task_generative_replay<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    teacher: Option<&Denoiser<N>>,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Replay);
    let Some(teacher) = require_teacher(teacher, task_index)? else {
        return fit(student, spec, schedule, streams, |_, _, _| Ok(None));
    };
    let source = ReplaySource::new(teacher, cfg, data.len(), schedule, &mut streams.replay)?;
    fit(student, spec, schedule, streams, |student, _, rng| {
        let rb = source.next(schedule, rng)?;
        replay_loss_grad(student, &rb.noisy).map(Some)
    })
}

/// Generative distillation: per step, with independent t, s, ε, ε̄,
/// (1/i)·‖ε − ε_θ(x_t, t)‖² + (1 − 1/i)·λ·‖ε_teacher(x̄_s, s) − ε_θ(x̄_s, s)‖²
/// where x̄_s re-noises a fresh N-step DDIM sample of the teacher.
pub fn train_task_generative_distillation<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    teacher: Option<&Denoiser<N>>,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Distillation { lambda: cfg.lambda });
    let Some(teacher) = require_teacher(teacher, task_index)? else {
        return fit(student, spec, schedule, streams, |_, _, _| Ok(None));
    };
    let source = ReplaySource::new(teacher, cfg, data.len(), schedule, &mut streams.replay)?;
    fit(student, spec, schedule, streams, |student, _, rng| {
        let rb = source.next(schedule, rng)?;
        distill_loss_grad(student, teacher, rb.noisy.x_t.view(), &rb.noisy.t).map(Some)
    })
}

/// Distillation on the current task's own noisy batch (no replay samples).
pub fn train_task_lwf_distill<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    teacher: Option<&Denoiser<N>>,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Distillation { lambda: cfg.lambda });
    let Some(teacher) = require_teacher(teacher, task_index)? else {
        return fit(student, spec, schedule, streams, |_, _, _| Ok(None));
    };
    fit(student, spec, schedule, streams, |student, current, _| {
        lwf_distill_loss_grad(student, teacher, current).map(Some)
    })
}

/// Distillation with standard normal inputs at uniformly drawn timesteps.
pub fn train_task_gaussian_distill<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    teacher: Option<&Denoiser<N>>,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Distillation { lambda: cfg.lambda });
    let Some(teacher) = require_teacher(teacher, task_index)? else {
        return fit(student, spec, schedule, streams, |_, _, _| Ok(None));
    };
    let batch = cfg.batch_size_replay;
    fit(student, spec, schedule, streams, |student, _, rng| {
        let t = uniform_timesteps(rng, batch, schedule.horizon());
        gaussian_distill_loss_grad(student, teacher, &t, rng).map(Some)
    })
}

/// L_simple on current data plus L_simple on a buffer minibatch, weighted
/// by r = 1/i. An empty buffer leaves plain finetuning.
pub fn train_task_experience_replay<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    buffer: &ReplayBuffer,
    data: &LabeledSet,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let spec = base_fit(cfg, data, task_index, PastWeighting::Replay);
    let batch = cfg.batch_size_replay;
    fit(student, spec, schedule, streams, |student, _, rng| {
        if buffer.is_empty() {
            return Ok(None);
        }
        let mb = buffer.sample(batch, rng);
        let noisy = renoise(mb.x.view(), schedule, rng)?;
        replay_loss_grad(student, &noisy).map(Some)
    })
}

/// Run one task with the configured strategy.
#[allow(clippy::too_many_arguments)]
pub fn train_task<N: EpsNetwork>(
    student: &mut Denoiser<N>,
    teacher: Option<&Denoiser<N>>,
    buffer: &ReplayBuffer,
    sequence: &TaskSequence,
    task_index: usize,
    cfg: &StrategyConfig,
    schedule: &VarianceSchedule,
    streams: &mut TrainStreams,
) -> Result<TaskLog> {
    let data = &sequence.task(task_index).train;
    match cfg.strategy {
        Strategy::Finetune => train_task_finetune(student, data, task_index, cfg, schedule, streams),
        Strategy::Joint => train_task_joint(student, sequence, task_index, cfg, schedule, streams),
        Strategy::GenerativeReplay => {
            train_task_generative_replay(student, teacher, data, task_index, cfg, schedule, streams)
        }
        Strategy::GenerativeDistillation => {
            train_task_generative_distillation(student, teacher, data, task_index, cfg, schedule, streams)
        }
        Strategy::LwfDistill => train_task_lwf_distill(student, teacher, data, task_index, cfg, schedule, streams),
        Strategy::GaussianDistill => {
            train_task_gaussian_distill(student, teacher, data, task_index, cfg, schedule, streams)
        }
        Strategy::ExperienceReplay => {
            train_task_experience_replay(student, buffer, data, task_index, cfg, schedule, streams)
        }
    }
}

/// Models and logs produced by [`run_sequence`].
#[derive(Clone, Debug)]
pub struct SequenceOutcome<N> {
    /// Frozen model after each completed task.
    pub snapshots: Vec<Denoiser<N>>,
    pub logs: Vec<TaskLog>,
}

/// A sequence aborted at `task_index`; `completed` holds everything before it.
#[derive(Debug)]
pub struct SequenceFailure<N> {
    pub task_index: usize,
    pub completed: SequenceOutcome<N>,
    pub source: Error,
}

impl<N> fmt::Display for SequenceFailure<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task {} failed after {} completed task(s): {}",
            self.task_index,
            self.completed.logs.len(),
            self.source
        )
    }
}

impl<N: fmt::Debug> std::error::Error for SequenceFailure<N> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// State handed to the per-task hook once a task finishes.
pub struct TaskEnd<'a, N> {
    pub task_index: usize,
    pub model: &'a Denoiser<N>,
    pub log: &'a TaskLog,
    pub sequence: &'a TaskSequence,
}

/// Train `init` over every task in order. Before each task after the first,
/// teacher-based strategies freeze a copy of the model and continue from a
/// student initialized to it. `after_task` runs after every task (evaluation,
/// checkpointing); its errors abort the sequence like training errors do.
pub fn run_sequence<N, H>(
    init: Denoiser<N>,
    cfg: &StrategyConfig,
    sequence: &TaskSequence,
    schedule: &VarianceSchedule,
    master_seed: u64,
    mut after_task: H,
) -> std::result::Result<SequenceOutcome<N>, SequenceFailure<N>>
where
    N: EpsNetwork,
    H: FnMut(TaskEnd<'_, N>) -> Result<()>,
{
    let mut outcome = SequenceOutcome { snapshots: Vec::new(), logs: Vec::new() };
    if let Err(source) = cfg.validate() {
        return Err(SequenceFailure { task_index: 1, completed: outcome, source });
    }
    let mut model = init;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, sequence.data_dim());
    for i in 1..=sequence.len() {
        let teacher = (i > 1 && cfg.strategy.needs_teacher()).then(|| model.snapshot_frozen());
        if let Some(t) = &teacher {
            model = Denoiser::init_student_from_teacher(t);
        }
        let mut streams = TrainStreams::for_task(master_seed, i);
        let step = train_task(&mut model, teacher.as_ref(), &buffer, sequence, i, cfg, schedule, &mut streams)
            .and_then(|log| {
                if cfg.strategy == Strategy::ExperienceReplay {
                    let mut rng = substream(master_seed, Stream::Buffer, i as u64);
                    buffer.rebalance(&sequence.task(i).train, &mut rng);
                }
                after_task(TaskEnd { task_index: i, model: &model, log: &log, sequence })?;
                Ok(log)
            });
        match step {
            Ok(log) => {
                outcome.logs.push(log);
                outcome.snapshots.push(model.snapshot_frozen());
            }
            Err(source) => return Err(SequenceFailure { task_index: i, completed: outcome, source }),
        }
    }
    Ok(outcome)
}
