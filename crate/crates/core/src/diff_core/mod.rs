//! Dense tensor math with reverse-mode gradients, a parameter store, SGD and
//! a finite-difference gradient checker.

mod params;
mod tape;
mod tensor;

pub use params::{grad_check, sgd_step, GradCheckReport, GradMismatch, OptimState, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    argmax, cosine, gap, log_softmax_rows, matmul, matmul_nt, matmul_tn, sigmoid, softmax_rows,
    softplus, Tensor,
};
