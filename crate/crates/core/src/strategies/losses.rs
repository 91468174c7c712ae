//! Past-task loss terms and their weighting against the current-task loss.

use ndarray::{Array2, ArrayView2};

use crate::denoiser::{mean_sq_diff, regression_loss, regression_loss_grad, Denoiser, EpsNetwork, LossGrad};
use crate::diffusion::{ddim_sample, forward_sample, NoisySample, SamplerConfig, VarianceSchedule};
use crate::error::{check_shape, Error, Result};
use crate::rng::{standard_normal, uniform_timesteps, Rng};

/// Teacher-generated clean samples and their re-noised versions.
#[derive(Clone, Debug)]
pub struct ReplayBatch {
    pub generated: Array2<f64>,
    pub noisy: NoisySample,
}

/// `batch` clean samples from the teacher via deterministic N-step DDIM.
pub fn generate_replay<N: EpsNetwork>(
    teacher: &Denoiser<N>,
    teacher_steps: usize,
    batch: usize,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let cfg = SamplerConfig::deterministic(teacher_steps, schedule.horizon())?;
    ddim_sample(teacher, &cfg, batch, schedule, rng)
}

/// x_t = √ᾱ_t·DDIM_N(teacher) + √(1−ᾱ_t)·ε with fresh t ~ U{1..T} and
/// ε ~ N(0, I) per sample.
pub fn make_replay_inputs<N: EpsNetwork>(
    teacher: &Denoiser<N>,
    teacher_steps: usize,
    batch: usize,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<ReplayBatch> {
    let generated = generate_replay(teacher, teacher_steps, batch, schedule, rng)?;
    let noisy = renoise(generated.view(), schedule, rng)?;
    Ok(ReplayBatch { generated, noisy })
}

/// Forward-noise clean rows at uniformly drawn timesteps.
pub fn renoise(x0: ArrayView2<f64>, schedule: &VarianceSchedule, rng: &mut Rng) -> Result<NoisySample> {
    let t = uniform_timesteps(rng, x0.nrows(), schedule.horizon());
    let eps = standard_normal(rng, x0.nrows(), x0.ncols());
    forward_sample(x0, &t, eps.view(), schedule)
}

/// Mean ‖ε − ε_student(x_t, t)‖² on replayed inputs.
pub fn replay_loss<N: EpsNetwork>(student: &Denoiser<N>, replay: &NoisySample) -> Result<f64> {
    regression_loss(student, replay.x_t.view(), &replay.t, replay.eps.view())
}

pub fn replay_loss_grad<N: EpsNetwork>(student: &Denoiser<N>, replay: &NoisySample) -> Result<LossGrad> {
    regression_loss_grad(student, replay.x_t.view(), &replay.t, replay.eps.view())
}

/// Mean ‖ε_teacher(x_t, t) − ε_student(x_t, t)‖².
pub fn distill_loss<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    x_t: ArrayView2<f64>,
    t: &[usize],
) -> Result<f64> {
    let target = teacher.predict_noise(x_t, t)?;
    let pred = student.predict_noise(x_t, t)?;
    check_shape(target.shape(), pred.shape())?;
    Ok(mean_sq_diff(pred.view(), target.view()))
}

/// Gradient of [`distill_loss`] with respect to the student only; the
/// teacher's output is treated as a constant target.
pub fn distill_loss_grad<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    x_t: ArrayView2<f64>,
    t: &[usize],
) -> Result<LossGrad> {
    let target = teacher.predict_noise(x_t, t)?;
    regression_loss_grad(student, x_t, t, target.view())
}

/// Distillation evaluated on the current task's own noisy batch.
pub fn lwf_distill_loss<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    current: &NoisySample,
) -> Result<f64> {
    distill_loss(student, teacher, current.x_t.view(), &current.t)
}

pub fn lwf_distill_loss_grad<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    current: &NoisySample,
) -> Result<LossGrad> {
    distill_loss_grad(student, teacher, current.x_t.view(), &current.t)
}

/// Standard normal inputs of the given shape for Gaussian-noise distillation.
pub fn gaussian_inputs(rows: usize, dim: usize, rng: &mut Rng) -> Array2<f64> {
    standard_normal(rng, rows, dim)
}

/// Distillation with x_t ~ N(0, I) at the given timesteps.
pub fn gaussian_distill_loss<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    t: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    let x = gaussian_inputs(t.len(), student.data_dim(), rng);
    distill_loss(student, teacher, x.view(), t)
}

pub fn gaussian_distill_loss_grad<N: EpsNetwork>(
    student: &Denoiser<N>,
    teacher: &Denoiser<N>,
    t: &[usize],
    rng: &mut Rng,
) -> Result<LossGrad> {
    let x = gaussian_inputs(t.len(), student.data_dim(), rng);
    distill_loss_grad(student, teacher, x.view(), t)
}

/// How the past-task term enters the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PastWeighting {
    /// r·L_current + (1−r)·L_past
    Replay,
    /// r·L_current + (1−r)·λ·L_past
    Distillation { lambda: f64 },
}

/// r = 1/i, the current task's share after `i` tasks.
pub fn current_share(task_index: usize) -> Result<f64> {
    if task_index < 1 {
        return Err(Error::InvalidTaskIndex);
    }
    Ok(1.0 / task_index as f64)
}

/// Coefficients (current, past) applied to the two loss terms.
pub fn loss_coefficients(task_index: usize, weighting: PastWeighting) -> Result<(f64, f64)> {
    let r = current_share(task_index)?;
    Ok(match weighting {
        PastWeighting::Replay => (r, 1.0 - r),
        PastWeighting::Distillation { lambda } => (r, (1.0 - r) * lambda),
    })
}

pub fn combined_loss(
    task_index: usize,
    weighting: PastWeighting,
    loss_current: f64,
    loss_past: f64,
) -> Result<f64> {
    let (a, b) = loss_coefficients(task_index, weighting)?;
    Ok(a * loss_current + b * loss_past)
}
