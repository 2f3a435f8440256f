//! Minimal reverse-mode automatic differentiation for small convolutional networks.
//!
//! Everything runs in `f64` on the CPU. Batched operations process each batch item
//! independently, so the values computed for one item never depend on the other
//! items in the batch.

mod error;
mod graph;
pub mod init;
mod optim;
mod params;
mod resize;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::ParamSet;
pub use resize::{bilinear_taps, resize_bilinear, Tap};
pub use tensor::Tensor;
