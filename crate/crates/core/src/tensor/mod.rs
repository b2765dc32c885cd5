//! Dense tensors, tape-based reverse-mode differentiation, and momentum SGD.

mod array;
mod graph;
mod loss;
mod params;

pub use array::{argmax, Tensor};
pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
pub use loss::{check_one_hot, cross_entropy, cross_entropy_with, mse_with, Reduction};
pub use params::{Checkpoint, ParameterSet, CHECKPOINT_FORMAT_VERSION};

pub(crate) use array::{matmul_into, softmax_slice};
