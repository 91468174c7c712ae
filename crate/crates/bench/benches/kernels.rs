use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use cldiff_core::diffusion::{ddim_sample, simple_loss_grad};
use cldiff_core::metrics::frechet_distance;
use cldiff_core::rng::{standard_normal, stream, uniform_timesteps, Stream};
use cldiff_core::{Denoiser, DenoiserDescriptor, FeatureStats, SamplerConfig, VarianceSchedule};

const DIM: usize = 256;
const BATCH: usize = 64;

fn desk_denoiser() -> (Denoiser, VarianceSchedule) {
    let desc = DenoiserDescriptor { data_shape: vec![16, 16], hidden: vec![256, 256], time_dim: 32, horizon: 100 };
    let mut den = Denoiser::mlp(desc, &mut stream(0, Stream::ModelInit));
    // Nonzero output layer so the benchmark exercises the full network.
    let noise = standard_normal(&mut stream(1, Stream::Eval), 1, den.num_params());
    for (p, n) in den.params_mut().unwrap().iter_mut().zip(noise.iter()) {
        *p += 0.01 * n;
    }
    (den, VarianceSchedule::linear(100, 1e-3, 0.1).unwrap())
}

fn denoiser(c: &mut Criterion) {
    let (den, schedule) = desk_denoiser();
    let mut rng = stream(2, Stream::Eval);
    let x0 = standard_normal(&mut rng, BATCH, DIM);
    let eps = standard_normal(&mut rng, BATCH, DIM);
    let t = uniform_timesteps(&mut rng, BATCH, 100);
    c.bench_function("denoiser forward, batch 64", |b| b.iter(|| den.predict_noise(x0.view(), &t).unwrap()));
    c.bench_function("denoiser loss and gradient, batch 64", |b| {
        b.iter(|| simple_loss_grad(&den, x0.view(), &t, eps.view(), &schedule).unwrap())
    });
    for steps in [2, 10] {
        let cfg = SamplerConfig::deterministic(steps, 100).unwrap();
        c.bench_function(&format!("ddim sampling, {steps} steps, batch 64"), |b| {
            b.iter(|| ddim_sample(&den, &cfg, BATCH, &schedule, &mut stream(3, Stream::Eval)).unwrap())
        });
    }
}

fn frechet(c: &mut Criterion) {
    let feats = |seed| {
        let x: Array2<f64> = standard_normal(&mut stream(seed, Stream::Eval), 500, 128);
        FeatureStats::from_features(x.view()).unwrap()
    };
    let (a, b) = (feats(4), feats(5));
    c.bench_function("frechet distance, 128 features", |bench| bench.iter(|| frechet_distance(&a, &b).unwrap()));
}

criterion_group!(benches, denoiser, frechet);
criterion_main!(benches);
