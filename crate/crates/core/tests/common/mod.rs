#![allow(dead_code)]

use cldiff_core::rng::{standard_normal, stream, Stream};
use cldiff_core::{ClassifierDescriptor, Denoiser, DenoiserDescriptor, LabeledSet, StrategyConfig, Strategy};

pub fn tiny_descriptor(dim: usize, horizon: usize) -> DenoiserDescriptor {
    DenoiserDescriptor { data_shape: vec![dim], hidden: vec![6], time_dim: 4, horizon }
}

/// Small random-weight denoiser whose output layer is perturbed away from
/// zero so that every parameter influences the output.
pub fn tiny_denoiser(dim: usize, horizon: usize, seed: u64) -> Denoiser {
    let mut den = Denoiser::mlp(tiny_descriptor(dim, horizon), &mut stream(seed, Stream::ModelInit));
    let noise = standard_normal(&mut stream(seed, Stream::Eval), 1, den.num_params());
    for (p, n) in den.params_mut().unwrap().iter_mut().zip(noise.iter()) {
        *p += 0.3 * n;
    }
    den
}

pub fn tiny_classifier_descriptor() -> ClassifierDescriptor {
    ClassifierDescriptor { input_dim: 3, hidden: vec![5], num_classes: 4, dropout: 0.0 }
}

/// Gaussian blobs in `dim` dimensions, one per label in `classes`.
pub fn blobs(classes: &[usize], per_class: usize, dim: usize, seed: u64) -> LabeledSet {
    let noise = standard_normal(&mut stream(seed, Stream::DataSplit), classes.len() * per_class, dim);
    let mut x = noise * 0.1;
    let mut y = Vec::new();
    for (k, &c) in classes.iter().enumerate() {
        for r in 0..per_class {
            let row = k * per_class + r;
            x[[row, c % dim]] += 0.4;
            y.push(c);
        }
    }
    LabeledSet::new(x, y).unwrap()
}

pub fn fast_config(strategy: Strategy) -> StrategyConfig {
    let mut cfg = StrategyConfig::for_strategy(strategy);
    cfg.epochs_per_task = 3;
    cfg.batch_size_current = 8;
    cfg.batch_size_replay = 8;
    cfg.learning_rate = 1e-2;
    cfg
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
