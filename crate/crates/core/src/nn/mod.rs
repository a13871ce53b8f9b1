//! Minimal dense-tensor and reverse-mode differentiation engine.
//!
//! Exactly the operations the classifier needs, nothing more: 1-D
//! convolution with same-padding, batch normalization, GRU building blocks,
//! time-distributed dense layers, the usual activations, max-over-time
//! pooling, binary cross-entropy, and the Adam optimizer. Everything runs in
//! double precision so finite-difference gradient checks can use tight
//! tolerances.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, GraphError, Var};
pub use tensor::Tensor;
