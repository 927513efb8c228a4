//! Minimal differentiable computation substrate.
//!
//! Dense `f64` tensors, a single-use reverse-mode [`Graph`], MLP layers,
//! loss primitives, SGD with momentum, a finite-difference checker and a
//! binary checkpoint format.

mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{compare_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{grouped_mlp_maxpool, shared_mlp_maxpool, Mlp};
pub use loss::{huber, huber_of_norms, FocalParams, HUBER_DELTA};
pub use optim::{clip_global_norm, Sgd};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
