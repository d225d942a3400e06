//! Conditional diffusion on synthetic phantoms, with attribute traversal
//! by swapping the prompt embedding partway through deterministic sampling.

pub mod attr;
pub mod diffusion;
pub mod error;
pub mod interpolation;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod trajectory;

pub use attr::Attribute;
pub use error::{Error, Result};
pub use tensor::Tensor;
