use ndarray::Array2;

/// Sinusoidal features of an integer timestep: `dim/2` sines followed by
/// `dim/2` cosines over geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Embedding lookup table for timesteps `0..=horizon`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    dim: usize,
    table: Array2<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize, horizon: usize) -> Self {
        let mut table = Array2::zeros((horizon + 1, dim));
        for t in 0..=horizon {
            for (j, v) in sinusoidal_embedding(t, dim).into_iter().enumerate() {
                table[[t, j]] = v;
            }
        }
        Self { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.table.nrows() - 1
    }

    pub fn batch(&self, ts: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ts.len(), self.dim));
        for (row, &t) in ts.iter().enumerate() {
            out.row_mut(row).assign(&self.table.row(t));
        }
        out
    }
}
