//! Minimal dense-network toolkit with hand-written backpropagation in `f64`.

mod adam;
mod embedding;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use embedding::{sinusoidal_embedding, TimeEmbedding};
pub use mlp::{Activation, Mlp, MlpSpec, MlpTape};
