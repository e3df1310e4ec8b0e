//! Differentially private GAN training primitives.
//!
//! The crate is `no_std` (it needs `alloc`) and holds only pure computation:
//! dense networks with per-example gradients ([`nn`]), DPSGD mechanics
//! ([`dp`]), Rényi-DP accounting ([`accountant`]), the discriminator/generator
//! training loop with fixed or adaptive step frequency ([`engine`]), and the
//! evaluation metrics ([`eval`]). File formats, datasets on disk and the CLI
//! live in the `dpgan` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod accountant;
pub mod data;
pub mod dp;
pub mod engine;
pub mod eval;
pub mod error;
pub mod linalg;
pub mod nn;

pub use error::{Error, Result};
pub use linalg::Matrix;
