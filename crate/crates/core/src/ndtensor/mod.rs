//! Dense n-dimensional arrays with a tape-based reverse-mode autodiff graph.
//!
//! Every learnable parameter of the encoders, decoder, rater encoder and
//! projection head lives in a [`Checkpoint`] and is bound into a fresh
//! [`Graph`] for each forward pass. Graphs are single-threaded; independent
//! graphs (one per sample) can be evaluated on different threads and their
//! gradients summed in a fixed order.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod rng;
mod tensor;

pub use checkpoint::{Checkpoint, DType, Grads, ParamId};
pub use graph::{Graph, Value};
pub use optim::{cosine_annealing_lr, AdamW, AdamWConfig};
pub use rng::Rng;
pub use tensor::{Real, Tensor};

/// Clamp applied to probabilities inside [`Graph::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;
