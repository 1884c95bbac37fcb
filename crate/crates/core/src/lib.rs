//! Implicit feature refinement: a weight-tied double-residual block whose
//! output is the fixed point `H* = F(H*; X)`, found with a limited-memory
//! Broyden solver and differentiated with the implicit function theorem.
//!
//! Explicit and unrolled heads are provided as baselines, together with
//! convergence diagnostics and a synthetic mask-refinement training loop.

pub mod blocks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod implicit;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod training;

pub use error::{IfrError, Result};
pub use tensor::Tensor;
