//! Generator evaluation: Fréchet distance on labeler features and
//! class-frequency divergence of generated samples.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    classifier_current_loss_grad, evaluate_accuracy, Classifier, ClassifierDescriptor,
};
use crate::denoiser::{Denoiser, EpsNetwork};
use crate::diffusion::{ddim_sample, SamplerConfig, VarianceSchedule};
use crate::error::{check_shape, Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::strategies::EpochSampler;
use crate::tasks::LabeledSet;

/// Added to every class frequency before renormalizing.
pub const FREQUENCY_SMOOTHING: f64 = 1e-6;
/// Minimum validation accuracy for a labeler's metrics to be trusted.
pub const LABELER_MIN_ACCURACY: f64 = 0.9;

/// Sample mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    /// Statistics of the rows of `features`.
    pub fn from_features(features: ArrayView2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::TooFewSamples { need: 2, got: n });
        }
        let mean = features.mean_axis(Axis(0)).expect("nonempty");
        let centered = &features - &mean;
        let mut covariance = centered.t().dot(&centered) / (n - 1) as f64;
        // Exact symmetry regardless of summation order.
        let sym = (&covariance + &covariance.t()) * 0.5;
        covariance.assign(&sym);
        Ok(Self { mean, covariance, sample_count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Labeler-feature statistics of a batch of images.
pub fn feature_stats(labeler: &Labeler, images: ArrayView2<f64>) -> Result<FeatureStats> {
    if images.nrows() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: images.nrows() });
    }
    FeatureStats::from_features(labeler.features(images)?.view())
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Eigenvalues of a symmetric matrix with round-off negatives clipped to zero.
/// Negatives larger than 1e-8 relative to the spectral radius (floored at 1)
/// are rejected.
fn clipped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let m = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::NotPositiveSemidefinite(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// ‖μ₁−μ₂‖² + Tr(C₁ + C₂ − 2(C₁C₂)^{1/2}).
///
/// The trace of (C₁C₂)^{1/2} is taken as the sum of square roots of the
/// eigenvalues of the symmetric matrix √C₁·C₂·√C₁, which shares its spectrum.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    check_shape(&[a.dim()], &[b.dim()])?;
    let d2: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let c1 = to_dmatrix(&a.covariance);
    let c2 = to_dmatrix(&b.covariance);
    let e1 = clipped_eigen(c1.clone())?;
    let sqrt_vals = e1.eigenvalues.map(f64::sqrt);
    let sqrt_c1 = &e1.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * e1.eigenvectors.transpose();
    let inner = &sqrt_c1 * &c2 * &sqrt_c1;
    let tr_sqrt: f64 = clipped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = d2 + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Additive smoothing followed by renormalization.
pub fn smooth_frequencies(freq: &[f64]) -> Vec<f64> {
    let total: f64 = freq.iter().map(|f| f + FREQUENCY_SMOOTHING).sum();
    freq.iter().map(|f| (f + FREQUENCY_SMOOTHING) / total).collect()
}

/// KL(p ‖ q) = Σ p_c·ln(p_c/q_c) after smoothing both vectors.
pub fn class_frequency_kld(true_freq: &[f64], predicted_freq: &[f64]) -> Result<f64> {
    check_shape(&[true_freq.len()], &[predicted_freq.len()])?;
    let p = smooth_frequencies(true_freq);
    let q = smooth_frequencies(predicted_freq);
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}

/// Frequencies of `labels` over `classes`, in that order. Labels outside
/// `classes` are ignored; with none inside, all frequencies are zero.
pub fn class_frequencies(labels: &[usize], classes: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; classes.len()];
    for l in labels {
        if let Some(k) = classes.iter().position(|c| c == l) {
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

/// Frozen all-class classifier used to label generated samples and as the
/// feature extractor for the Fréchet distance.
#[derive(Clone, Debug)]
pub struct Labeler {
    classifier: Classifier,
    validation_accuracy: f64,
}

impl Labeler {
    pub fn new(classifier: Classifier, validation_accuracy: f64) -> Self {
        Self { classifier, validation_accuracy }
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn validation_accuracy(&self) -> f64 {
        self.validation_accuracy
    }

    pub fn is_reliable(&self) -> bool {
        self.validation_accuracy >= LABELER_MIN_ACCURACY
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.classifier.features(x)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.classifier.predict(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            dropout: 0.1,
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
        }
    }
}

/// Train a classifier on all classes, holding out a random validation split,
/// and keep the parameters from the epoch with the best validation accuracy.
pub fn train_labeler(full: &LabeledSet, num_classes: usize, cfg: &LabelerConfig, rng: &mut Rng) -> Result<Labeler> {
    let n_val = ((full.len() as f64) * cfg.validation_fraction).round() as usize;
    if n_val < 1 || n_val >= full.len() {
        return Err(Error::TooFewSamples { need: 2, got: full.len() });
    }
    let perm = rand::seq::index::sample(rng, full.len(), full.len()).into_vec();
    let val = full.select(&perm[..n_val]);
    let train = full.select(&perm[n_val..]);
    let desc = ClassifierDescriptor {
        input_dim: full.dim(),
        hidden: cfg.hidden.clone(),
        num_classes,
        dropout: cfg.dropout,
    };
    let mut model = Classifier::new(desc, rng);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), model.num_params());
    let mut sampler = EpochSampler::new(train.len(), cfg.batch_size);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut best = (evaluate_accuracy(&model, &val)?, model.clone());
    for _ in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let rows = sampler.next_batch(rng);
            let x = train.x.select(Axis(0), &rows);
            let y: Vec<usize> = rows.iter().map(|&r| train.y[r]).collect();
            let lg = classifier_current_loss_grad(&model, x.view(), &y, Some(rng))?;
            adam.step(model.params_mut(), &lg.grad);
        }
        let acc = evaluate_accuracy(&model, &val)?;
        if acc > best.0 {
            best = (acc, model.clone());
        }
    }
    Ok(Labeler::new(best.1, best.0))
}

/// Metrics of the generator after one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_index: usize,
    pub classes: Vec<usize>,
    pub fid_proxy: f64,
    /// KL(true ‖ predicted) over the classes seen so far.
    pub kld: f64,
    /// KL(predicted ‖ true), logged alongside.
    pub kld_reverse: f64,
    pub n_samples: usize,
    pub eval_steps: usize,
}

/// Compare a batch of samples against the test rows of the seen classes.
/// The same samples feed both the Fréchet distance and the class
/// frequencies.
pub fn evaluate_samples(
    samples: ArrayView2<f64>,
    labeler: &Labeler,
    test_seen: &LabeledSet,
    classes: &[usize],
) -> Result<(f64, f64, f64)> {
    if test_seen.len() < 2 {
        return Err(Error::EmptyEvalSet);
    }
    let real = feature_stats(labeler, test_seen.x.view())?;
    let fake = feature_stats(labeler, samples)?;
    let fid = frechet_distance(&real, &fake)?;
    let truth = class_frequencies(&test_seen.y, classes);
    let predicted = class_frequencies(&labeler.predict(samples)?, classes);
    Ok((fid, class_frequency_kld(&truth, &predicted)?, class_frequency_kld(&predicted, &truth)?))
}

/// Draw `n_samples` DDIM samples, clip them to the data range and score
/// them against the test rows of `classes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generator<N: EpsNetwork>(
    den: &Denoiser<N>,
    labeler: &Labeler,
    test_seen: &LabeledSet,
    classes: &[usize],
    task_index: usize,
    n_samples: usize,
    eval_steps: usize,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<EvalRecord> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n_samples });
    }
    let cfg = SamplerConfig::deterministic(eval_steps, schedule.horizon())?;
    let mut samples = ddim_sample(den, &cfg, n_samples, schedule, rng)?;
    samples.mapv_inplace(|v| v.clamp(-0.5, 0.5));
    let (fid_proxy, kld, kld_reverse) = evaluate_samples(samples.view(), labeler, test_seen, classes)?;
    Ok(EvalRecord {
        task_index,
        classes: classes.to_vec(),
        fid_proxy,
        kld,
        kld_reverse,
        n_samples,
        eval_steps,
    })
}
