//! Reverse-mode differentiation and the layers the velocity model is built from.

pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{broadcast_index, BlockOutput, GnoLayer, GnoPlan, LayerNorm, Linear, Mhca, Mlp, TokenMixer};
pub use params::{Init, ParamId, ParamSlot, ParamStore};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
