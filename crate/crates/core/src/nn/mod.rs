//! Neural building blocks composed from tape operations.

mod attention;
mod layers;
mod params;
mod transformer;

pub use attention::MultiHeadAttention;
pub use layers::{Conv2d, Embedding, LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::{Bound, ParamBuilder, ParamId, ParamStore};
pub use transformer::{Decoder, DecoderLayer, Encoder, EncoderLayer, FeedForward};

#[cfg(test)]
mod tests;
