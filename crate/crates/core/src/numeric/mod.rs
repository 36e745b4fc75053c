//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
pub(crate) mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_gradient, finite_difference_param, relative_error, GRADIENT_NORM_FLOOR,
};
pub use ops::{layer_norm, logsumexp, softmax, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{backward, BackwardFn, Tape, Var};
pub use tensor::Tensor;
