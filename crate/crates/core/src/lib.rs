//! Micro-transformer laboratory for studying delayed generalization
//! ("grokking") on modular addition and S5 permutation composition.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod experiment;
pub mod model;
pub mod plot;
pub mod tasks;
pub mod training;
pub mod tensor;

pub use autodiff::{grad_check, AttentionSpec, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
