//! Numerical laboratory for entropy along unstable-foliation hierarchies of
//! torus diffeomorphisms.

pub mod cli;
pub mod cocycle;
pub mod config;
pub mod domination;
pub mod entropy;
pub mod error;
pub mod leaf;
pub mod linalg;
pub mod seeds;
pub mod systems;
pub mod verify;

pub use error::{Error, Result};
