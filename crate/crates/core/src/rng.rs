//! Seeded random streams.
//!
//! One master seed fans out into independent named ChaCha streams so that,
//! for example, drawing more evaluation samples never shifts the noise seen
//! by the training loop.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of a master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    DataSplit = 1,
    ModelInit = 2,
    Batches = 3,
    TrainNoise = 4,
    Replay = 5,
    Classifier = 6,
    Labeler = 7,
    Eval = 8,
    Grid = 9,
    Buffer = 10,
}

pub fn stream(master: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(which as u64);
    rng
}

/// Derive an independent stream for a sub-run (e.g. task `i` of a sequence).
pub fn substream(master: u64, which: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `n` timesteps drawn uniformly from `1..=horizon`.
pub fn uniform_timesteps(rng: &mut Rng, n: usize, horizon: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=horizon)).collect()
}
