//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records ops eagerly as they are built. Values are available
//! right away, [`Graph::backward`] runs the reverse sweep from a scalar root,
//! and [`Graph::forward`] replays the recorded ops after leaf values change,
//! which is what [`grad_check`] uses for central differences.
//!
//! ```
//! use pagen_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.named_leaf("x", Tensor::scalar(3.0).with_grad());
//! let y = g.mul(x, x).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.named("x").unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, primitive_graph, primitive_suite, relative_error, PRIMITIVES, GradCheckOptions, GradCheckReport, LeafCheck, RELATIVE_ERROR_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} refers to node {input} which does not precede it")]
    UnknownNode { node: usize, input: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("graph is empty")]
    EmptyGraph,
}
