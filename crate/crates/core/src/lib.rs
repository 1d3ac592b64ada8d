//! Initial noise optimization for text-to-image diffusion: score an initial
//! latent by its first-step cross- and self-attention maps and optimize it
//! into the valid region with a reparameterized Gaussian and Adam.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod backend;
pub mod cli;
pub mod container;
pub mod error;
pub mod noise;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod tensor;
pub mod trace;

pub use error::{InitnoError, Result};
