//! Synthetic tasks, metrics, baselines and sweeps.

pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod retrieval;
pub mod synth;
