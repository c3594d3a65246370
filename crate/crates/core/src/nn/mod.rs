//! Minimal reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Graph`] records operations define-by-run; [`Graph::backward`] walks
//! the tape once and returns gradients for every leaf that asked for them.
//! Everything is double precision so finite-difference checks hold tight
//! tolerances. Single-threaded by design: one graph per training step.

mod graph;
mod init;
mod optim;
mod params;

pub use graph::{Arr, Gradients, Graph, Var};
pub use init::{he_uniform, uniform_init, WeightInit};
pub use optim::Adam;
pub use params::{ParamBinding, ParamStore};
