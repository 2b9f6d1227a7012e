//! Minimal differentiable building blocks shared by the recognition and
//! flip-reasoning models.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{attend, dropout, sinusoidal_positions, Gru, LayerNorm, Linear, MultiHeadSelfAttention};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
