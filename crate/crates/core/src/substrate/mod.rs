//! Minimal dense numeric substrate: tensors, differentiable ops, an Adam
//! optimizer over named parameters, and a finite-difference gradient checker.
//!
//! Everything runs in f64; gradient checks at 1e-4 relative tolerance are
//! not reliable in single precision.

pub mod gradcheck;
pub mod ops;
pub mod store;
pub mod tensor;

pub use gradcheck::{gradient_check, GradientCheckResult, FD_STEP};
pub use ops::{affine, affine_backward, cosine_sim, relu, relu_backward, sim_hat, SIM_EPS};
pub use store::{Gradients, ParamStore, ParamShape};
pub use tensor::{Tensor1, Tensor2};
