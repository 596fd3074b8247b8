//! Label-invariant subgraph augmentation for graph out-of-distribution
//! learning: variational subgraph generators with an information constraint,
//! energy-based environment diversity, variance-penalized invariant training,
//! a structural-equation risk oracle, and synthetic benchmarks — plus a CLI
//! tying them together.

pub mod autodiff;
pub mod backbones;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod objectives;
pub mod sem;
pub mod trainer;

pub use error::{LisaError, Result};
