//! Layer primitives with explicit forward and backward passes.

mod act;
mod conv;
mod linear;
mod norm;

pub use act::{gelu, gelu_backward, leaky_relu, leaky_relu_backward, tanh_backward};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
