//! Machine characterization and kernel measurement for roofline models on
//! x86 NUMA systems.
//!
//! The crate benchmarks peak compute (runtime-generated FMA streams) and peak
//! memory bandwidth (fill/copy/non-temporal probes) per resource scenario,
//! measures a kernel's work, traffic and runtime through hardware performance
//! counters, and renders roofline plots and reports from the results.
//!
//! Modules map onto the stages of the pipeline:
//!
//! * [`topology`] — CPU/socket/node discovery, thread pinning, node-bound
//!   allocation; defines the resource [`topology::Scenario`].
//! * [`codegen`] — peak GFLOP/s via runtime-emitted, dependency-free FMA
//!   instruction streams.
//! * [`membench`] — peak GB/s via three independent bandwidth probes with
//!   NUMA binding and the dual-instance two-socket protocol.
//! * [`pmu`] — scoped FP_ARITH and IMC uncore counter access, the
//!   lane-weighted FLOP conversion, overhead subtraction, and a deterministic
//!   mock backend.
//! * [`kernels`] — built-in synthetic kernels with analytically known work
//!   and traffic.
//! * [`harness`] — orchestrates cache protocol, repetition and
//!   overhead-subtracted measurement of registered kernels.
//! * [`roofline`] — the pure model math: intensity, attainable performance,
//!   ridge point, bound classification, RC/ET percentages.
//! * [`report`] — result documents (canonical JSON), gnuplot scripts and text
//!   summaries.
//! * [`mock`] — the scripted backend configuration shared by all stages.

pub mod codegen;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod membench;
pub mod mock;
pub mod pmu;
pub mod report;
pub mod roofline;
pub mod topology;

pub use error::{Error, Result};
