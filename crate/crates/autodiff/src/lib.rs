//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Leaves are either constants or named
//! parameters; [`Graph::backward`] sweeps the arena in reverse and returns a
//! [`GradientMap`] keyed by parameter name.
//!
//! ```
//! use svio_autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
//! let mut g = Graph::new();
//! let w = g.param_from(&store, "w").unwrap();
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss, &store).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod check;
mod error;
mod graph;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{BinaryKind, Conv2dSpec, ElementwiseKind, Graph, UnaryKind, Var};
pub use params::{GradientMap, ParamStore};
pub use tensor::Tensor;
