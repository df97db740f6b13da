//! Numeric core for fine-grained facial age editing with a diffusion model.
//!
//! Everything here is pure computation over in-memory values: dense tensors
//! with a reverse-mode tape, the noise schedule and samplers, decoupled
//! multi-branch cross-attention conditioning, the latent-space age guidance
//! head, a procedural face renderer with analytic oracles, and the training
//! and evaluation loops built on top of them. File formats, configuration
//! files and the command line live in the `agedit` crate.
#![no_std]

extern crate alloc;

pub mod acg;
pub mod autodiff;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod identity;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synthface;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
