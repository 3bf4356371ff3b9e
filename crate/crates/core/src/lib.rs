//! Generalizable spectral embeddings for graphs with cold-start nodes.

pub mod codec;
pub mod coldstart;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gcn;
pub mod graph;
pub mod laplacian;
pub mod linalg;
pub mod nn;
pub mod phormer;
pub mod rng;
pub mod sparse;
pub mod spectral_map;
pub mod synthetic;

pub use error::{Result, SparcError};
