//! Reverse-mode automatic differentiation over the handful of primitives the
//! transceiver networks use, plus Adam and a finite-difference checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod gumbel;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::ParamSet;
pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{softmax_in_place, ComplexMatrix, Gradients, Graph, Var};
pub use gumbel::{gumbel_noise, gumbel_select, gumbel_softmax_st, GumbelSelection};
pub use tensor::{argmax, Tensor};
