//! Reversible duplex Transformer.
//!
//! One parameter set maps token sequences source→target by running its
//! layer stack one way and target→source by running the algebraic inverse
//! of the same stack. Outputs are decoded with CTC, and training combines
//! both directions with a layer-wise forward/backward agreement term and a
//! cycle-consistency term.

pub mod autodiff;
pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{RederError, Result};
pub use tensor::Tensor;
