//! Dense-tensor substrate with reverse-mode differentiation.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use optim::{adam_step, AdamHyper, AdamState, InitSpec, ParamGroup, ParamSet, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
