//! Dense tensors, a reverse-mode tape, seeded randomness and gradient checks.

pub mod gradcheck;
pub mod rng;
mod scalar;
pub mod tape;
mod tensor;

pub use rng::{derive_seed, RngStream};
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, softmax, Tensor, LAYER_NORM_EPS};

#[allow(unused_imports)]
pub(crate) use tape::{log_sum_exp, sq_dist_values};
