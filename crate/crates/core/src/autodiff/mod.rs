//! Reverse-mode differentiation over dynamically recorded graphs.
//!
//! Operations are methods on [`Graph`]; each returns a [`Var`] handle. A graph
//! is built per forward pass, differentiated once with [`Graph::backward`],
//! then dropped. Independent graphs share nothing and can live on separate
//! threads.

mod elementwise;
mod graph;
mod nn;
mod shape_ops;

pub use elementwise::{sigmoid, softplus};
pub use graph::{Graph, Var};
pub use nn::{Conv2dSpec, LAYER_NORM_EPS};
