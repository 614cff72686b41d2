//! Dense matrices, a reverse-mode tape, parameters and optimisation.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use graph::{AttnLayout, Grads, Graph, Mat, Var};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
