//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Gradients are ordinary graph values: passing `create_graph = true` to
//! [`grad`] records the backward sweep, so penalties built from gradients
//! (gradient norms, for instance) can be differentiated with respect to
//! model parameters.

mod init;
pub mod nn;
mod ops;
mod param;
mod tensor;
mod var;

pub use init::orthogonal;
pub use ops::result_shape;
pub use param::{Adam, AdamConfig, Param, ParamStore};
pub use tensor::{broadcast_shapes, Tensor};
pub use var::{grad, grad_with_seed, is_grad_enabled, no_grad, with_grad_mode, BackwardCtx, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("gradient seed of shape {seed:?} does not match output shape {output:?}")]
    SeedShape { output: Vec<usize>, seed: Vec<usize> },
    #[error("backward of `{op}` produced shape {got:?}, expected {expected:?}")]
    BackwardShape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}
