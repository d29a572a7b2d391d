//! Reverse-mode automatic differentiation with the small layer set used by
//! the tissue classifier and the heatmap regressor. Gradients reach both
//! parameters and input pixels.

pub mod checkpoint;
mod graph;
pub mod model;
mod params;
mod real;
mod sgd;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, PROB_FLOOR};
pub use model::{Layer, Model, ModelBuilder};
pub use params::ParamSet;
pub use real::Real;
pub use sgd::Sgd;
pub use tensor::Tensor;
