//! Engine for building, training, and interrogating hierarchical variational
//! autoencoders whose latent spaces are wired along a directed acyclic graph
//! of data modalities.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod dist;
pub mod error;
pub mod graph;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
