//! Dense `f64` tensors, a reverse-mode tape with the primitives the network
//! needs, and a finite-difference gradient checker.

mod gemm;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Offender};
pub use tape::{
    conv_output_len, softmax_rows, Gradients, NormMode, OpKind, RunningStats, Tape, Var, BN_EPS,
    BN_MOMENTUM,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
