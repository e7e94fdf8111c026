//! Policy optimization in square-root-ratio (Bhattacharyya/Hellinger) geometry.

pub mod analytics;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod geometry;
pub mod learners;
pub mod nets;
pub mod rollout;
pub mod runner;

pub use error::{Error, Result};
