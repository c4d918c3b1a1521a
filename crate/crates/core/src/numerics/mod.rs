//! Dense arrays, tape-based reverse-mode differentiation, Adam, and a
//! finite-difference gradient oracle.

mod array;
pub mod gradcheck;
mod params;
mod tape;

pub use array::{argmax, layer_norm, softmax, Array, LAYER_NORM_EPS};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, ParameterStore};
pub use tape::{AttentionLayout, Tape, Var};

/// The seedable generator threaded through every stochastic operation.
pub type Prng = rand_chacha::ChaCha8Rng;
