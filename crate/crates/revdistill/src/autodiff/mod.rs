//! From-scratch reverse-mode automatic differentiation: dense kernels, an
//! eager tensor DAG, the op set the models are built from, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod kernel;
pub mod ops;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use tensor::{Elem, Tensor};
