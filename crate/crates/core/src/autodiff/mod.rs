//! Reverse-mode automatic differentiation on a per-sample tape, the layer
//! set used by the classifier and the attention gates, SGD with Nesterov
//! momentum, a central-difference gradient checker and a text checkpoint
//! format.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
mod graph;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_gradcheck, GradCheckConfig, GradCheckReport};
pub use graph::{stable_sigmoid, Gradients, Graph, Var};
pub use optim::Sgd;
