//! Reverse-mode automatic differentiation over small dense tensors.

mod adam;
mod conv;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::{ConvGeom, Padding};
pub use params::{clip_grad_norm, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
