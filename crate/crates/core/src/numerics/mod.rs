//! Differentiable computation substrate.
//!
//! Networks are built by recording operator applications on a [`Graph`]
//! (a tape). [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar loss with respect to every node. Everything is
//! generic over [`Scalar`] so the same model code runs at 32-bit for
//! training and at 64-bit for [`gradcheck`].

mod array;
mod conv;
pub mod gradcheck;
mod graph;
pub mod init;
mod optim;
mod params;
mod scalar;

pub use array::Array;
pub use conv::conv_out_len;
pub use conv::conv_transpose_out_len;
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use optim::{cosine_lr, Optimizer, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use scalar::Scalar;
