//! Deterministic dense linear algebra for the small trainable networks.
//!
//! Everything here is plain `f64` row-major arithmetic with hand-derived
//! backward passes; there is no autodiff graph. [`grad_check`] is the safety
//! net that every backward pass in the crate is tested against. All
//! transcendentals go through `libm` so results are bit-identical across
//! platforms, and no op introduces thread-dependent reduction orders.

mod gradcheck;
mod ops;
mod param;
mod rng;
mod tensor;

pub use gradcheck::{directional_grad_check, grad_check};
pub(crate) mod ops_internal {
    pub(crate) use super::ops::{gelu_grad_scalar, gelu_scalar, layernorm_slice, softmax_slice};
}
pub use ops::{
    gelu, gelu_backward, layernorm, layernorm_backward, matmul, matmul_backward, matmul_prec,
    softmax, softmax_backward, Precision,
};
pub use param::Parameter;
pub use rng::SeededRng;
pub use tensor::Tensor;
