//! Experiment harness for the planar disentangled-dynamics system: file
//! formats, configuration, plots, and the command implementations behind the
//! `ddc` binary.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod plot;
pub mod report;
pub mod runner;
