//! Dense `f32` tensors, a define-by-run autodiff record, and SGD.
//!
//! Sized for training small convolutional classifiers on a CPU. Batched
//! kernels are data-parallel across samples when the `parallel` feature is
//! enabled and fall back to sequential loops otherwise; both paths give
//! bitwise-identical results.

pub mod error;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use kernels::ConvGeometry;
pub use optim::{LrSchedule, Sgd};
pub use tensor::Tensor;
