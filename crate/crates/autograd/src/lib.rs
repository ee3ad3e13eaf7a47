//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine records operations on a [`Graph`] and differentiates them with
//! [`Graph::grad`]. Because every backward rule is expressed with graph
//! operations, [`Graph::grad_graph`] yields gradients that are themselves
//! differentiable, which is what a gradient penalty on a critic's input needs.

mod graph;
pub mod kernels;
mod spatial;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::ConvGeom;
pub use spatial::{apply_maps, SpatialMap};
pub use tensor::{Real, Tensor};
