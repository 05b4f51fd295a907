//! Desk-scale autoregressive conditioning plus flow-matching generation on a
//! procedural shapes world.

pub mod conditioner;
pub mod cli;
pub mod evaluator;
pub mod error;
pub mod matrix;
pub mod models;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod velocity;
pub mod world;

pub use error::{Error, Result};
