//! Parameter storage and the layers the latent mapping model is built from.

mod layers;
mod params;

pub use layers::{
    default_groups, Conv2dLayer, ConvBlock, Layer, SelfAttention2d, GN_EPS, PRELU_INIT,
};
pub use params::{Bound, ParamId, ParamStore};
