//! Multi-head deep metric learning at desk scale.
//!
//! The pipeline is backbone → second-order attention on the local and
//! global maps → GAP+GMP pooling → per-branch projection → concatenated
//! embedding, trained with a multi-similarity + proxy-anchor objective and
//! evaluated by exact Recall@K.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod soa;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};
