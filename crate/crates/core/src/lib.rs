//! Multi-object tracking by growing and pruning tracklet hypotheses, scored by
//! a learned sequence model trained on the tracker's own candidates.

pub mod config;
pub mod engine;
pub mod experiment;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod scorer;
pub mod sequence;
pub mod synth;
pub mod tracklet;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
