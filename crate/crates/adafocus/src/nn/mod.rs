//! Minimal hand-rolled neural network layers with explicit backward passes.
//!
//! Everything runs in f64. Forward passes are pure; `*_cached` variants
//! return the activations needed by `backward`, which accumulates parameter
//! gradients inside the layer.

pub mod conv;
pub mod gru;
pub mod linear;
pub mod ops;
pub mod optim;
pub mod param;

pub use conv::Conv2d;
pub use gru::GruCell;
pub use linear::Linear;
pub use param::{param_hash, ParamVisitor, Params};
