//! Minimal tensor algebra with reverse-mode differentiation.
//!
//! Storage is NCHW row-major. `f32` is used for training and inference;
//! every op is generic over [`Elem`] so the same graphs can be evaluated in
//! `f64` for finite-difference checks.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Grads, Graph, Var};
pub use params::{init, ParamStore, Parameter};
pub use rng::{PortableRng, RngState};
pub use tensor::{Elem, Tensor};

#[cfg(test)]
mod tests;
