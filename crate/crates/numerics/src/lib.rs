//! Dense tensors, reverse-mode differentiation and seeded randomness in
//! `f32` and `f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use graph::{Graph, Var};
pub use kernels::Window;
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
