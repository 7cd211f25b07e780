//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

pub mod gradcheck;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use gradcheck::check_gradients;
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
