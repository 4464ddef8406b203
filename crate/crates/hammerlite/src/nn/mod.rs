//! Dense numeric kernels, reverse-mode autodiff over a per-batch static
//! graph, and the Adam optimizer with decoupled weight decay.
//!
//! Training runs in single precision; verification (gradient checks, oracle
//! comparisons) runs the same code in double precision via the [`Real`]
//! trait. Graphs are rebuilt per batch, so there is no captured control flow
//! and backward is a plain reverse sweep over the node list.

pub mod func;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Grads, Graph, NodeId, ParamId, ParamSet};
pub use optim::{adam_step, lr_at, AdamState, LrSchedule, OptimError};
pub use tensor::{Real, Tensor};
