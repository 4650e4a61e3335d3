//! Dense vectors and matrices, feed-forward networks with exact reverse-mode
//! input gradients, cosine similarity and a central-difference oracle.

mod io;
mod linalg;
mod mlp;
mod objective;

pub use io::{LayerDoc, NetworkDoc, NETWORK_FORMAT_VERSION};
pub use linalg::{
    axpy, cosine_similarity, cosine_similarity_grad, dot, finite_difference_grad, norm, scaled,
    Matrix,
};
pub use mlp::{dual_layer_forward, Activation, Layer, Mlp, Trace};
pub use objective::Objective;
