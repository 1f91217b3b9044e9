//! Dynamic sparse training: sparse topologies, pruning and growth criteria,
//! schedules, a reference trainer and tools for comparing the masks that
//! different criteria produce.

pub mod analysis;
pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod presets;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod snapshot;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use error::{DstError, Result};
