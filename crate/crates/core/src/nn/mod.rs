//! Neural-network building blocks on top of candle tensors.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::Adam;
pub use layers::{BatchNorm2d, Conv2d, Forward, LayerNorm, Linear, SpectralNorm};
pub use params::{Init, ParamStore, Scope};
