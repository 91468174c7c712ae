//! Continually trained classifier fed with generated replay and
//! temperature-softened labels from its previous version.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, EpsNetwork, LossGrad};
use crate::diffusion::{ddim_sample, SamplerConfig, VarianceSchedule};
use crate::error::{check_shape, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpSpec};
use crate::rng::Rng;
use crate::strategies::{loss_coefficients, EpochSampler, PastWeighting};
use crate::tasks::LabeledSet;

const LOG_FLOOR: f64 = 1e-12;

/// Shape of a classifier network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDescriptor {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
}

impl ClassifierDescriptor {
    fn mlp_spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.num_classes);
        MlpSpec { dims, cond_dim: 0, activation: Activation::Relu, dropout: self.dropout, zero_init_output: false, gated_skip: false }
    }
}

/// ReLU MLP producing one logit per class.
#[derive(Clone, Debug)]
pub struct Classifier {
    descriptor: ClassifierDescriptor,
    mlp: Mlp,
}

impl Classifier {
    pub fn new(descriptor: ClassifierDescriptor, rng: &mut Rng) -> Self {
        let mlp = Mlp::init(descriptor.mlp_spec(), rng);
        Self { descriptor, mlp }
    }

    pub fn from_params(descriptor: ClassifierDescriptor, params: Vec<f64>) -> Result<Self> {
        let got = params.len();
        let mlp = Mlp::from_params(descriptor.mlp_spec(), params).ok_or_else(|| {
            let expected = Mlp::zeros(descriptor.mlp_spec()).num_params();
            Error::ShapeMismatch { expected: vec![expected], got: vec![got] }
        })?;
        Ok(Self { descriptor, mlp })
    }

    pub fn descriptor(&self) -> &ClassifierDescriptor {
        &self.descriptor
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        check_shape(&[x.nrows(), self.descriptor.input_dim], x.shape())
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.mlp.forward(x, None))
    }

    /// Penultimate-layer activations.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.mlp.forward_with_features(x, None).0)
    }

    /// Arg-max class per row; ties resolve to the lowest class id.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.logits(x)?.view()))
    }

    /// Mean loss over a batch given d(loss)/d(logits) as a function of the logits.
    fn loss_grad<F>(&self, x: ArrayView2<f64>, dropout_rng: Option<&mut Rng>, f: F) -> Result<LossGrad>
    where
        F: FnOnce(ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        self.check_input(x)?;
        let (logits, tape) = self.mlp.forward_tape(x, None, dropout_rng);
        let (value, grad_out) = f(logits.view())?;
        let mut grad = vec![0.0; self.num_params()];
        self.mlp.backward(&tape, grad_out.view(), &mut grad);
        Ok(LossGrad { value, grad })
    }
}

pub(crate) fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect()
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut p = logits.mapv(|z| z / temperature);
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Temperature-softened class probabilities of the previous classifier.
pub fn soft_labels(prev: &Classifier, x: ArrayView2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_rows(prev.logits(x)?.view(), temperature))
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    match y.iter().find(|&&c| c >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn check_soft_targets(targets: ArrayView2<f64>) -> Result<()> {
    for (r, row) in targets.rows().into_iter().enumerate() {
        let s = row.sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidTargets(format!("row {r} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

fn cross_entropy(logits: ArrayView2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut p = softmax_rows(logits, 1.0);
    let value = -y.iter().enumerate().map(|(r, &c)| p[[r, c]].max(LOG_FLOOR).ln()).sum::<f64>() / b;
    for (r, &c) in y.iter().enumerate() {
        p[[r, c]] -= 1.0;
    }
    p /= b;
    (value, p)
}

fn soft_cross_entropy(logits: ArrayView2<f64>, targets: ArrayView2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let p = softmax_rows(logits, temperature);
    let r2 = temperature * temperature;
    let mut value = 0.0;
    Zip::from(&p).and(targets).for_each(|&q, &t| value -= t * q.max(LOG_FLOOR).ln());
    let grad = (&p - &targets) * (temperature / b);
    (r2 * value / b, grad)
}

/// Mean cross-entropy against hard labels.
pub fn classifier_current_loss(c: &Classifier, x: ArrayView2<f64>, y: &[usize]) -> Result<f64> {
    check_labels(y, c.num_classes())?;
    check_shape(&[y.len()], &[x.nrows()])?;
    Ok(cross_entropy(c.logits(x)?.view(), y).0)
}

pub fn classifier_current_loss_grad(
    c: &Classifier,
    x: ArrayView2<f64>,
    y: &[usize],
    dropout_rng: Option<&mut Rng>,
) -> Result<LossGrad> {
    check_labels(y, c.num_classes())?;
    check_shape(&[y.len()], &[x.nrows()])?;
    c.loss_grad(x, dropout_rng, |z| Ok(cross_entropy(z, y)))
}

/// Mean of −R²·Σ_c ỹ_c·log softmax(z/R)_c over the batch.
pub fn classifier_replay_loss(
    c: &Classifier,
    x: ArrayView2<f64>,
    soft_targets: ArrayView2<f64>,
    temperature: f64,
) -> Result<f64> {
    check_shape(&[x.nrows(), c.num_classes()], soft_targets.shape())?;
    check_soft_targets(soft_targets)?;
    Ok(soft_cross_entropy(c.logits(x)?.view(), soft_targets, temperature).0)
}

pub fn classifier_replay_loss_grad(
    c: &Classifier,
    x: ArrayView2<f64>,
    soft_targets: ArrayView2<f64>,
    temperature: f64,
    dropout_rng: Option<&mut Rng>,
) -> Result<LossGrad> {
    check_shape(&[x.nrows(), c.num_classes()], soft_targets.shape())?;
    check_soft_targets(soft_targets)?;
    c.loss_grad(x, dropout_rng, |z| Ok(soft_cross_entropy(z, soft_targets, temperature)))
}

/// Fraction of rows whose predicted class matches the label.
pub fn evaluate_accuracy(c: &Classifier, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let pred = c.predict(data.x.view())?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Training settings for the downstream classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierReplayConfig {
    pub temperature: f64,
    pub replay_ddim_steps: usize,
    pub epochs: usize,
    pub batch_size_current: usize,
    pub batch_size_replay: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierReplayConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            replay_ddim_steps: 10,
            epochs: 20,
            batch_size_current: 64,
            batch_size_replay: 64,
            learning_rate: 1e-3,
        }
    }
}

impl ClassifierReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("classifier temperature must be positive".into()));
        }
        if self.replay_ddim_steps < 1 || self.epochs < 1 || self.batch_size_current < 1 || self.batch_size_replay < 1 {
            return Err(Error::Config("classifier steps, epochs and batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("classifier learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen sources of replay for tasks after the first.
pub struct ClassifierReplay<'a, N> {
    pub prev_classifier: &'a Classifier,
    pub generator: &'a Denoiser<N>,
    pub schedule: &'a VarianceSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierLog {
    pub task_index: usize,
    pub steps: usize,
    pub mean_current_loss: f64,
    pub mean_replay_loss: Option<f64>,
}

/// Minimize r·CE(current) + (1−r)·L_replay with r = 1/i. Replay images are
/// fresh DDIM samples of the generator, clipped to the data range, labeled
/// by the previous classifier at the configured temperature. Without
/// `replay` the task trains on plain cross-entropy, which is an error for
/// `task_index > 1` unless `allow_no_replay` is set (finetune and joint
/// baselines).
pub fn train_classifier_task<N: EpsNetwork>(
    classifier: &mut Classifier,
    replay: Option<ClassifierReplay<'_, N>>,
    data: &LabeledSet,
    task_index: usize,
    allow_no_replay: bool,
    cfg: &ClassifierReplayConfig,
    rng: &mut Rng,
) -> Result<ClassifierLog> {
    cfg.validate()?;
    if task_index > 1 && replay.is_none() && !allow_no_replay {
        return Err(Error::MissingTeacher(task_index));
    }
    if data.is_empty() {
        return Err(Error::Dataset(format!("task {task_index} has no classifier training samples")));
    }
    let replay = if task_index > 1 { replay } else { None };
    let sampler_cfg = match &replay {
        Some(r) => Some(SamplerConfig::deterministic(cfg.replay_ddim_steps, r.schedule.horizon())?),
        None => None,
    };
    let (w_current, w_replay) = loss_coefficients(task_index, PastWeighting::Replay)?;
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size_current);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), classifier.num_params());
    let mut sampler = EpochSampler::new(data.len(), cfg.batch_size_current);
    let (mut sum_current, mut sum_replay) = (0.0, 0.0);
    for _ in 0..steps {
        let rows = sampler.next_batch(rng);
        let x = data.x.select(Axis(0), &rows);
        let y: Vec<usize> = rows.iter().map(|&r| data.y[r]).collect();
        let current = classifier_current_loss_grad(classifier, x.view(), &y, Some(rng))?;
        sum_current += current.value;
        let total = match (&replay, &sampler_cfg) {
            (Some(r), Some(sc)) => {
                let mut gen = ddim_sample(r.generator, sc, cfg.batch_size_replay, r.schedule, rng)?;
                gen.mapv_inplace(|v| v.clamp(-0.5, 0.5));
                let targets = soft_labels(r.prev_classifier, gen.view(), cfg.temperature)?;
                let past =
                    classifier_replay_loss_grad(classifier, gen.view(), targets.view(), cfg.temperature, Some(rng))?;
                sum_replay += past.value;
                let mut total = LossGrad::zero(classifier.num_params());
                total.add_scaled(w_current, &current);
                total.add_scaled(w_replay, &past);
                total
            }
            _ => current,
        };
        adam.step(classifier.params_mut(), &total.grad);
    }
    let n = steps.max(1) as f64;
    Ok(ClassifierLog {
        task_index,
        steps,
        mean_current_loss: sum_current / n,
        mean_replay_loss: replay.is_some().then(|| sum_replay / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny(classes: usize) -> Classifier {
        let desc = ClassifierDescriptor { input_dim: 3, hidden: vec![5], num_classes: classes, dropout: 0.0 };
        Classifier::new(desc, &mut stream(3, Stream::Classifier))
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(array![[2.0, 0.0]].view(), 2.0);
        assert_relative_eq!(p[[0, 0]], 0.7310585786300049, max_relative = 1e-12);
        assert_relative_eq!(p[[0, 1]], 0.2689414213699951, max_relative = 1e-12);
        let flat = softmax_rows(array![[3.0, -1.0]].view(), 1e9);
        assert_relative_eq!(flat[[0, 0]], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn cross_entropy_examples() {
        let (v, _) = cross_entropy(array![[0.0; 10]].view(), &[4]);
        assert_relative_eq!(v, 10f64.ln(), max_relative = 1e-14);
        let z = array![[0.8f64.ln(), 0.2f64.ln()]];
        assert_relative_eq!(cross_entropy(z.view(), &[0]).0, -(0.8f64.ln()), max_relative = 1e-12);
    }

    #[test]
    fn replay_loss_two_class_value() {
        // Student logits (1, 1) against teacher logits (2, 0) at R = 2.
        let targets = softmax_rows(array![[2.0, 0.0]].view(), 2.0);
        let (v, _) = soft_cross_entropy(array![[1.0, 1.0]].view(), targets.view(), 2.0);
        assert_relative_eq!(v, 4.0 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_targets() {
        let c = tiny(2);
        let x = Array2::zeros((1, 3));
        assert!(matches!(
            classifier_current_loss(&c, x.view(), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(classifier_replay_loss(&c, x.view(), array![[0.7, 0.7]].view(), 2.0).is_err());
        assert!(evaluate_accuracy(&c, &LabeledSet::empty(3)).is_err());
    }

    #[test]
    fn accuracy_counts_matches() {
        let c = tiny(3);
        let x = standard_normal_rows(6);
        let pred = c.predict(x.view()).unwrap();
        let mut y = pred.clone();
        let set = LabeledSet::new(x.clone(), y.clone()).unwrap();
        assert_eq!(evaluate_accuracy(&c, &set).unwrap(), 1.0);
        y[0] = (y[0] + 1) % 3;
        y[1] = (y[1] + 1) % 3;
        let set = LabeledSet::new(x, y).unwrap();
        assert_relative_eq!(evaluate_accuracy(&c, &set).unwrap(), 4.0 / 6.0);
    }

    fn standard_normal_rows(n: usize) -> Array2<f64> {
        crate::rng::standard_normal(&mut stream(9, Stream::Eval), n, 3)
    }

    #[test]
    fn later_task_without_replay_is_rejected() {
        let mut c = tiny(2);
        let set = LabeledSet::new(standard_normal_rows(4), vec![0, 1, 0, 1]).unwrap();
        let cfg = ClassifierReplayConfig { epochs: 1, ..Default::default() };
        let mut rng = stream(0, Stream::Classifier);
        let r = train_classifier_task::<crate::denoiser::MlpEps>(&mut c, None, &set, 2, false, &cfg, &mut rng);
        assert!(matches!(r, Err(Error::MissingTeacher(2))));
        assert!(train_classifier_task::<crate::denoiser::MlpEps>(&mut c, None, &set, 1, false, &cfg, &mut rng).is_ok());
    }
}
