//! Synthetic data, metrics and flow file formats.

pub mod colorize;
pub mod flo;
pub mod metrics;
pub mod synth;
