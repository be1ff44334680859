//! Reparameterized discrete diffusion: noise schedules, forward kernels,
//! backward posteriors, routing samplers and a small trainable denoiser.

pub mod categorical;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod files;
pub mod processes;
pub mod sampler;
pub mod schedules;
pub mod trainer;
pub mod verify;

pub use categorical::{Categorical, TokenId};
pub use error::{Error, Result};
