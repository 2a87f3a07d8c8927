//! Dense numerical kernels and the reverse-mode autodiff tape.

pub mod eig;
pub mod gradcheck;
pub mod matrix;
pub mod svd;
pub mod tape;
pub mod tensor;

pub use eig::{eig, Eigen};
pub use gradcheck::grad_check;
pub use matrix::{complex_norm, ComplexMatrix, ComplexVector, DenseMatrix};
pub use svd::{pinv, svd, Svd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
