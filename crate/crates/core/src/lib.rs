//! Simulator and library for node learning: persistent per-node learners on
//! drifting non-IID streams that exchange knowledge opportunistically over
//! simulated wireless contacts.

pub mod coalition;
pub mod config;
pub mod context;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod exchange;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod network;
pub mod node;
pub mod resources;
pub mod rng;

pub use error::{Error, Result};
