//! Experiment harness: configs, training, evaluation, probes, ablations and
//! the file formats they share.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pgm;
pub mod plots;
pub mod probe;
pub mod train;
