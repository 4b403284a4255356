//! Dense tensors, sampling and convolution kernels, and a reverse-mode tape.

mod dense;
pub mod ops;
mod scalar;
mod tape;

pub use dense::DenseTensor;
pub use ops::{conv3d, elementwise_mul, relu, sigmoid, trilinear_sample, trilinear_sample_into};
pub use scalar::Scalar;
pub use tape::{ParamId, ParamSet, ParamTensor, Tape, Var};

