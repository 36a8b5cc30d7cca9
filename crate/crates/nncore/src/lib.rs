//! A small dense-tensor engine for 64-bit floats.
//!
//! Computations are recorded on a [`Graph`] (a tape) and differentiated in
//! reverse mode. Learnable weights live in a [`ParamStore`] outside any
//! graph, so one store can be reused by many forward passes, and the
//! optimizer in [`optim`] updates it in place.
//!
//! ```
//! use nncore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap());
//! let mut g = Graph::new();
//! let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
//! let wv = g.param(&store, w);
//! let y = g.matmul(x, wv).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(wv).unwrap(), &[3.0, 4.0]);
//! ```

mod error;
mod kernels;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
