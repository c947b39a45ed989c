//! The scripted backend's configuration: one JSON file that stands in for
//! the machine. It supplies the topology, the ISA, per-call compute timing,
//! per-pass bandwidth timing, and the counter samples and kernel runtimes
//! the measurement stages consume in order.
//!
//! Scripts make the entire pipeline a pure function of (script, config), so
//! end-to-end runs can be compared byte-for-byte against golden files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codegen::{ComputeBenchConfig, VectorIsa};
use crate::error::{Error, Result};
use crate::membench::MockBandwidthScript;
use crate::pmu::{CounterMask, CounterSample, MockCounters};
use crate::topology::MachineTopology;

/// Synthetic-topology parameters; the scripted machine need not resemble
/// the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockTopology {
    pub sockets: usize,
    pub cores_per_socket: usize,
    pub threads_per_core: usize,
    pub llc_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub machine_descriptor: String,
    pub topology: MockTopology,
    pub isa: VectorIsa,
    /// Scripted duration of one emitted-stream call (peak compute runs a
    /// simulated clock off this).
    pub compute_seconds_per_call: f64,
    pub bandwidth: MockBandwidthScript,
    #[serde(default)]
    pub counter_mask: CounterMask,
    /// Consumed strictly in order, one per sampled region.
    #[serde(default)]
    pub counter_samples: Vec<CounterSample>,
    /// Consumed strictly in order, one per measured execute.
    #[serde(default)]
    pub kernel_runtimes_seconds: Vec<f64>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<MockScript> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MockScript(format!("cannot read script {}: {e}", path.display()))
        })?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| Error::MockScript(format!("malformed script {}: {e}", path.display())))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if t.sockets == 0 || t.cores_per_socket == 0 || t.threads_per_core == 0 {
            return Err(Error::MockScript("degenerate scripted topology".into()));
        }
        if !(self.compute_seconds_per_call > 0.0) {
            return Err(Error::MockScript(format!(
                "non-positive compute_seconds_per_call {}",
                self.compute_seconds_per_call
            )));
        }
        if let Some(r) = self
            .kernel_runtimes_seconds
            .iter()
            .find(|r| !(**r > 0.0) || !r.is_finite())
        {
            return Err(Error::MockScript(format!("non-positive kernel runtime {r}")));
        }
        Ok(())
    }

    pub fn machine(&self) -> Result<MachineTopology> {
        let t = &self.topology;
        MachineTopology::synthetic(t.sockets, t.cores_per_socket, t.threads_per_core, t.llc_bytes)
    }

    /// Fresh counter replay positioned at the start of the script.
    pub fn counters(&self) -> MockCounters {
        MockCounters::new(
            self.counter_mask,
            self.counter_samples.clone(),
            self.kernel_runtimes_seconds.clone(),
        )
    }
}

/// The stream configuration scripted runs assume. Fixed so that scripted
/// peak-compute figures depend only on the script: one call retires
/// unroll x inner_iterations = 1e6 vector instructions.
pub fn mock_compute_config() -> ComputeBenchConfig {
    ComputeBenchConfig {
        n_accumulators: 10,
        unroll: 10,
        inner_iterations: 100_000,
        min_duration_seconds: 1.0,
    }
}
