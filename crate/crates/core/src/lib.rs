//! Continual temporal knowledge graph reasoning with generative replay.
//!
//! A snapshot-sequence reasoner is trained task by task over a stream of
//! timestamped graphs. Before each task, historical context around the new
//! task's entities is sampled, a guided diffusion model turns it into
//! representations of the past, and those are mixed back into the reasoner's
//! layers while it learns the new task.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod optim;
pub mod par;
pub mod reasoner;
pub mod replay;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
