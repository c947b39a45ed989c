//! Command-line front end for the roofline toolchain.
//!
//! `roofline probe` reports what the machine offers; `bench` turns peaks
//! into platform profiles; `measure` runs synthetic kernels under a chosen
//! cache protocol and derives roofline points; `report` renders gnuplot
//! scripts and a summary table. `full` chains all four. Stages share a
//! single JSON result document in the output directory.

pub mod config;
pub mod pipeline;

pub use config::{Cli, Command, CommonArgs, Config};
pub use pipeline::{cmd_full, cmd_probe, dispatch, Pipeline};
