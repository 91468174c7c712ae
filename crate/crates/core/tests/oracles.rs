//! Worked examples with values computed by hand or by an independent
//! scalar evaluation.

mod common;

use approx::assert_relative_eq;
use ndarray::{array, Array2};

use cldiff_core::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser, Checkpoint};
use cldiff_core::classifier::{
    classifier_current_loss, classifier_replay_loss, evaluate_accuracy, soft_labels,
};
use cldiff_core::denoiser::toy::FnEps;
use cldiff_core::diffusion::{ddim_step, ddpm_sample, forward_sample, simple_loss};
use cldiff_core::metrics::{class_frequencies, class_frequency_kld, FeatureStats};
use cldiff_core::rng::{standard_normal, stream, Stream};
use cldiff_core::strategies::{
    combined_loss, distill_loss, make_replay_inputs, replay_loss, PastWeighting,
};
use cldiff_core::*;

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

fn constant_eps(dim: usize, horizon: usize, f: fn(f64, usize) -> f64) -> Denoiser<FnEps> {
    Denoiser::new(FnEps { dim, f }, horizon)
}

/// Linear classifier over 2-D inputs whose logits equal the input.
fn identity_classifier() -> Classifier {
    let d = ClassifierDescriptor { input_dim: 2, hidden: vec![], num_classes: 2, dropout: 0.0 };
    Classifier::from_params(d, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()
}

#[test]
fn schedule_products() {
    let s = VarianceSchedule::linear(1, 0.1, 0.1).unwrap();
    assert_eq!(s.betas(), &[0.1]);
    assert_relative_eq!(s.alpha_bars()[0], 0.9, max_relative = 1e-15);
    let s = VarianceSchedule::linear(2, 0.1, 0.3).unwrap();
    assert_relative_eq!(s.alpha_bars()[0], 0.9, max_relative = 1e-15);
    assert_relative_eq!(s.alpha_bars()[1], 0.63, max_relative = 1e-14);
}

#[test]
fn forward_sample_scalar() {
    let s = VarianceSchedule::from_betas(vec![0.36]).unwrap();
    let out = forward_sample(scalar(2.0).view(), &[1], scalar(1.0).view(), &s).unwrap();
    assert_relative_eq!(out.x_t[[0, 0]], 2.2, max_relative = 1e-14);
}

#[test]
fn simple_loss_two_element_batch() {
    // Prediction is 0.5 everywhere; targets 0.2 and 0.6 leave errors 0.3 and -0.1.
    let s = VarianceSchedule::linear(10, 0.01, 0.2).unwrap();
    let den = constant_eps(1, 10, |_, _| 0.5);
    let x0 = array![[0.7], [-0.4]];
    let eps = array![[0.2], [0.6]];
    let l = simple_loss(&den, x0.view(), &[3, 8], eps.view(), &s).unwrap();
    assert_relative_eq!(l, 0.05, max_relative = 1e-12);
}

#[test]
fn ddim_step_scalar_hand_value() {
    // alpha_bar_1 = 0.81, alpha_bar_2 = 0.25.
    let s = VarianceSchedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
    assert_relative_eq!(s.alpha_bar(2), 0.25, max_relative = 1e-14);
    let den = constant_eps(1, 2, |_, _| 0.5);
    let out = ddim_step(&den, scalar(1.0).view(), 2, 1, 0.0, None, &s).unwrap();
    let expected = 0.9 * (1.0 - 0.75f64.sqrt() * 0.5) / 0.5 + 0.19f64.sqrt() * 0.5;
    assert_relative_eq!(out[[0, 0]], expected, max_relative = 1e-12);
    assert!((out[[0, 0]] - 1.238522).abs() < 1e-6);
}

#[test]
fn ddpm_single_step_adds_no_noise() {
    let s = VarianceSchedule::from_betas(vec![0.3]).unwrap();
    let den = constant_eps(2, 1, |x, _| 0.5 * x);
    let out = ddpm_sample(&den, &s, 3, &mut stream(4, Stream::Eval)).unwrap();
    let x1 = standard_normal(&mut stream(4, Stream::Eval), 3, 2);
    let (beta, ab) = (0.3, 0.7f64);
    let expected = x1.mapv(|x| (x - beta / (1.0 - ab).sqrt() * 0.5 * x) / ab.sqrt());
    for (a, b) in out.iter().zip(expected.iter()) {
        assert_relative_eq!(*a, *b, max_relative = 1e-12);
    }
}

#[test]
fn combined_loss_weights() {
    let d = combined_loss(4, PastWeighting::Distillation { lambda: 0.75 }, 0.8, 0.4).unwrap();
    assert_relative_eq!(d, 0.425, max_relative = 1e-14);
    let r = combined_loss(2, PastWeighting::Replay, 0.6, 0.2).unwrap();
    assert_relative_eq!(r, 0.4, max_relative = 1e-14);
    assert_eq!(combined_loss(1, PastWeighting::Replay, 0.37, 99.0).unwrap(), 0.37);
    assert!(combined_loss(0, PastWeighting::Replay, 1.0, 1.0).is_err());
}

#[test]
fn replay_and_distill_offsets() {
    let student = constant_eps(1, 10, |_, _| 0.5);
    let sample = cldiff_core::NoisySample { x_t: array![[0.1], [0.9]], t: vec![2, 9], eps: array![[0.3], [0.3]] };
    assert_relative_eq!(replay_loss(&student, &sample).unwrap(), 0.04, max_relative = 1e-12);

    let teacher = constant_eps(3, 10, |x, t| 0.2 * x - t as f64 * 0.01).snapshot_frozen();
    let shifted = constant_eps(3, 10, |x, t| 0.2 * x - t as f64 * 0.01 + 0.1);
    let x = standard_normal(&mut stream(1, Stream::Eval), 5, 3);
    let t = [1, 3, 5, 7, 10];
    assert_relative_eq!(distill_loss(&shifted, &teacher, x.view(), &t).unwrap(), 0.01, max_relative = 1e-10);
    assert_eq!(distill_loss(&teacher, &teacher, x.view(), &t).unwrap(), 0.0);
}

#[test]
fn replay_inputs_are_renoised_teacher_samples() {
    let s = VarianceSchedule::linear(20, 1e-3, 0.2).unwrap();
    let teacher = constant_eps(2, 20, |x, t| (0.3 * x).tanh() + t as f64 * 1e-3).snapshot_frozen();
    let rb = make_replay_inputs(&teacher, 2, 7, &s, &mut stream(3, Stream::Replay)).unwrap();
    assert_eq!(rb.noisy.x_t.dim(), (7, 2));
    assert_eq!(rb.noisy.eps.dim(), (7, 2));
    assert_eq!(rb.noisy.t.len(), 7);
    for r in 0..7 {
        let ab = s.alpha_bar(rb.noisy.t[r]);
        for c in 0..2 {
            let expected = ab.sqrt() * rb.generated[[r, c]] + (1.0 - ab).sqrt() * rb.noisy.eps[[r, c]];
            assert_relative_eq!(rb.noisy.x_t[[r, c]], expected, max_relative = 1e-12);
        }
    }
}

#[test]
fn soft_label_examples() {
    let c = identity_classifier();
    let p = soft_labels(&c, array![[2.0, 0.0]].view(), 2.0).unwrap();
    assert!((p[[0, 0]] - 0.7311).abs() < 1e-4 && (p[[0, 1]] - 0.2689).abs() < 1e-4);
    let p1 = soft_labels(&c, array![[2.0, 0.0]].view(), 1.0).unwrap();
    let e = 2.0f64.exp();
    assert_relative_eq!(p1[[0, 0]], e / (e + 1.0), max_relative = 1e-14);
    let hot = soft_labels(&c, array![[2.0, 0.0]].view(), 1e9).unwrap();
    assert!((hot[[0, 0]] - 0.5).abs() < 1e-8);
}

#[test]
fn cross_entropy_examples() {
    let c = identity_classifier();
    let x = array![[0.8f64.ln(), 0.2f64.ln()]];
    assert_relative_eq!(classifier_current_loss(&c, x.view(), &[0]).unwrap(), -(0.8f64.ln()), max_relative = 1e-12);
    let d = ClassifierDescriptor { input_dim: 10, hidden: vec![], num_classes: 10, dropout: 0.0 };
    let uniform = Classifier::from_params(d, vec![0.0; 110]).unwrap();
    let l = classifier_current_loss(&uniform, Array2::ones((4, 10)).view(), &[0, 3, 5, 9]).unwrap();
    assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
}

#[test]
fn replay_loss_two_class_case() {
    // Teacher logits (2, 0) and student logits (1, 1) at R = 2.
    let c = identity_classifier();
    let targets = soft_labels(&c, array![[2.0, 0.0]].view(), 2.0).unwrap();
    let l = classifier_replay_loss(&c, array![[1.0, 1.0]].view(), targets.view(), 2.0).unwrap();
    let p = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = -4.0 * (p * 0.5f64.ln() + (1.0 - p) * 0.5f64.ln());
    assert_relative_eq!(l, expected, max_relative = 1e-12);
    assert_relative_eq!(l, 4.0 * 2.0f64.ln(), max_relative = 1e-12);

    // Matching logits leave R² times the target entropy.
    let x = array![[0.4, -1.1]];
    let t = soft_labels(&c, x.view(), 2.0).unwrap();
    let entropy: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
    let l = classifier_replay_loss(&c, x.view(), t.view(), 2.0).unwrap();
    assert_relative_eq!(l, 4.0 * entropy, max_relative = 1e-12);
}

#[test]
fn accuracy_examples() {
    let d = ClassifierDescriptor { input_dim: 10, hidden: vec![], num_classes: 10, dropout: 0.0 };
    let mut eye = vec![0.0; 110];
    for k in 0..10 {
        eye[k * 10 + k] = 1.0;
    }
    let echo = Classifier::from_params(d.clone(), eye).unwrap();
    let mut x = Array2::zeros((30, 10));
    let y: Vec<usize> = (0..30).map(|r| r % 10).collect();
    for (r, &c) in y.iter().enumerate() {
        x[[r, c]] = 1.0;
    }
    let set = LabeledSet::new(x, y).unwrap();
    assert_eq!(evaluate_accuracy(&echo, &set).unwrap(), 1.0);
    let mut constant = vec![0.0; 110];
    constant[100 + 3] = 1.0;
    let constant = Classifier::from_params(d, constant).unwrap();
    assert_relative_eq!(evaluate_accuracy(&constant, &set).unwrap(), 0.1, max_relative = 1e-12);
}

#[test]
fn covariance_is_unbiased() {
    let st = FeatureStats::from_features(array![[0.0, 0.0], [2.0, 0.0]].view()).unwrap();
    assert_eq!(st.mean, array![1.0, 0.0]);
    assert_eq!(st.covariance, array![[2.0, 0.0], [0.0, 0.0]]);
    assert_eq!(st.sample_count, 2);
    let same = FeatureStats::from_features(array![[0.3, 0.1], [0.3, 0.1]].view()).unwrap();
    assert!(same.covariance.iter().all(|&v| v == 0.0));
    assert!(FeatureStats::from_features(array![[1.0, 2.0]].view()).is_err());
}

#[test]
fn kld_examples() {
    assert_eq!(class_frequency_kld(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    let last_only = class_frequency_kld(&[0.25; 4], &[0.0, 0.0, 0.5, 0.5]).unwrap();
    assert!(last_only.is_finite() && last_only > 3.0);
    assert_eq!(class_frequencies(&[4, 4, 7, 1], &[4, 7]), vec![2.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn buffer_capacity_zero_stays_empty() {
    let mut b = ReplayBuffer::new(0, 4);
    let mut rng = stream(0, Stream::Buffer);
    for k in 0..3 {
        b.rebalance(&common::blobs(&[k], 5, 4, k as u64), &mut rng);
        assert!(b.is_empty());
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let den = common::tiny_denoiser(3, 10, 2);
    let path = dir.path().join("d.ckpt");
    save_denoiser(&path, &den).unwrap();
    let back = load_denoiser(&path, den.descriptor()).unwrap();
    assert_eq!(back.params(), den.params());

    let mut other = den.descriptor().clone();
    other.hidden = vec![7];
    assert!(load_denoiser(&path, &other).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(Checkpoint::decode(&bytes).is_err());

    let c = Classifier::new(common::tiny_classifier_descriptor(), &mut stream(1, Stream::Classifier));
    let cpath = dir.path().join("c.ckpt");
    save_classifier(&cpath, &c).unwrap();
    assert_eq!(load_classifier(&cpath, c.descriptor()).unwrap().params(), c.params());
    assert!(load_denoiser(&cpath, den.descriptor()).is_err());
}
