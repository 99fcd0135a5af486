//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Graphs are built eagerly by calling ops on [`Var`]s; [`Var::backward`] sweeps
//! them in reverse creation order. Model weights live in [`Param`]s owned by
//! [`Module`]s and enter a graph through [`Param::var`].

mod scalar;
mod tensor;
mod var;

pub mod init;
pub mod nn;
pub mod ops;
pub mod optim;
mod param;

pub use param::{Module, Param};
pub use scalar::Float;
pub use tensor::Tensor;
pub use var::{grad_enabled, no_grad, BackCtx, Gradients, Var};
