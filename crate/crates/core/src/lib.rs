//! Offline safe reinforcement learning with diffusion-regularised policies.

pub mod cmdp;
pub mod config;
pub mod critics;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod grad_manip;
pub mod mlp;
pub mod pipeline;
pub mod policy;
pub mod safe_adapt;

pub use error::{Error, Result};
