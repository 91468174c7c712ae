//! Continual-learning strategies for the diffusion model.

mod buffer;
mod config;
mod losses;
mod train;

pub use buffer::ReplayBuffer;
pub use config::{Strategy, StrategyConfig};
pub use losses::*;
pub use train::*;
