//! Latent Koopman embeddings for control-affine systems, with value learning
//! and greedy control in the latent space.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod bundle;
pub mod config;
pub mod data;
pub mod envs;
pub mod error;
pub mod koopman;
pub mod nn;
pub mod numkit;
pub mod pipeline;
pub mod seed;
pub mod valuectl;

pub use error::{KeecError, Result};
