//! Transformer decoder that predicts clean expression codes from noisy ones.

mod checkpoint;
mod mask;
mod network;
mod ops;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use mask::AttentionMask;
pub use network::{embed_timestamp, film_modulate, forward, loss_gradients, Denoise, LossGradients};
pub use ops::sinusoidal;
pub use params::{Attention, DecoderBlock, DenoiserConfig, DenoiserParams, Film, LayerNorm, Linear};
