//! Dense tensors, tape-based reverse-mode differentiation, AdamW and
//! parameter checkpoints. Everything is `f64` and single-threaded.

mod fd;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use fd::finite_difference_gradient;
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamW};
pub use params::{MomentState, ParamStore};
pub use tensor::{broadcast_shape, Tensor};
