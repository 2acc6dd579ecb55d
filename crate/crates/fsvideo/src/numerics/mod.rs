//! Deterministic differentiable tensor substrate: elementwise ops, matmul,
//! softmax, the shape-preserving 3D convolution, spatial interpolation,
//! temporal average pooling, seeded splittable RNG, tensor file IO, and the
//! finite-difference gradient checker that every other module's tests lean on.

pub mod fsvt;
pub mod gradcheck;
mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, ScalarFn, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
pub use kernels::ConvMode;
pub use rng::SplitRng;
pub use tape::{Tape, Value};
pub use tensor::Tensor;
