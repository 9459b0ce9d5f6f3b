//! Uncertainty-driven swarm sampling with mean-field density feedback.

pub mod agents;
pub mod config;
pub mod controller;
pub mod density;
pub mod error;
pub mod gp;
pub mod grid;
pub mod mission;
pub mod pde;
pub mod planner;
pub mod rng;

pub use error::{Error, Result};
