//! Peak memory bandwidth per scenario via three independent probes:
//! platform bulk fill (memset), platform bulk copy (memcpy), and a
//! non-temporal streaming fill that bypasses read-for-ownership. The
//! scenario's peak is the best pass of the best method; bandwidth probes
//! are ceiling measurements, so the best pass beats the mean.
//!
//! Probes pin one worker per scenario CPU and bind the buffer to the
//! scenario's memory node; an affinity readback every pass guards against
//! threads migrating off-socket mid-measurement. The two-socket protocol
//! runs one fully bound probe group per node concurrently and reports the
//! sum of the per-node peaks.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roofline::GIGA;
use crate::topology::{
    current_affinity, pin_current_thread, BoundBuffer, MachineTopology, Scenario, ScenarioKind,
};

/// Declaration order is the tie-break order for equal rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMethod {
    LibFill,
    LibCopy,
    NtFill,
}

impl ProbeMethod {
    pub const ALL: [ProbeMethod; 3] = [ProbeMethod::LibFill, ProbeMethod::LibCopy, ProbeMethod::NtFill];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeMethod::LibFill => "lib-fill",
            ProbeMethod::LibCopy => "lib-copy",
            ProbeMethod::NtFill => "nt-fill",
        }
    }
}

impl std::fmt::Display for ProbeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the probe's pages live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeBinding {
    Node(usize),
    /// No explicit policy; pages land where first touch puts them.
    Interleaved,
}

pub const DEFAULT_BUFFER_BYTES: usize = 512 * 1024 * 1024;
/// Probes must dwarf any LLC; below this the "bandwidth" is a cache figure.
pub const MIN_BUFFER_BYTES: usize = 64 * 1024 * 1024;
/// Keep timing until this much wall time has accumulated...
pub const MIN_TOTAL_SECONDS: f64 = 1.0;
/// ...and at least this many passes have completed.
pub const MIN_PASSES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthProbe {
    pub method: ProbeMethod,
    pub buffer_bytes: usize,
    /// One pinned worker per CPU.
    pub cpus: Vec<usize>,
    pub node_binding: NodeBinding,
    /// Timing floor; the default honors MIN_TOTAL_SECONDS, tests shrink it.
    pub min_total_seconds: f64,
}

impl BandwidthProbe {
    pub fn new(method: ProbeMethod, buffer_bytes: usize, cpus: Vec<usize>, node_binding: NodeBinding) -> BandwidthProbe {
        BandwidthProbe {
            method,
            buffer_bytes,
            cpus,
            node_binding,
            min_total_seconds: MIN_TOTAL_SECONDS,
        }
    }

    pub fn threads(&self) -> usize {
        self.cpus.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_bytes < MIN_BUFFER_BYTES {
            return Err(Error::InvalidInput(format!(
                "probe buffer of {} bytes is below the {} byte floor",
                self.buffer_bytes, MIN_BUFFER_BYTES
            )));
        }
        if self.cpus.is_empty() {
            return Err(Error::InvalidInput("probe needs at least one CPU".into()));
        }
        Ok(())
    }

    /// Bytes the timed operation moves per pass: fills write the buffer
    /// once, copies read one buffer and write another.
    pub fn bytes_accounted_per_pass(&self) -> u64 {
        match self.method {
            ProbeMethod::LibFill | ProbeMethod::NtFill => self.buffer_bytes as u64,
            ProbeMethod::LibCopy => 2 * self.buffer_bytes as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthResult {
    pub probe: BandwidthProbe,
    pub gbps: f64,
    /// Bytes and seconds of the winning pass; gbps = bytes/seconds/1e9.
    pub bytes_accounted: u64,
    pub elapsed_seconds: f64,
    pub passes: u32,
}

/// The maximum over methods for one node group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePeak {
    pub node: usize,
    pub gbps: f64,
    pub method: ProbeMethod,
    pub results: Vec<BandwidthResult>,
    pub warnings: Vec<String>,
}

/// Two concurrent node-bound groups, summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSocketPeak {
    pub total_gbps: f64,
    pub nodes: Vec<NodePeak>,
}

/// Scripted pass timings for the mock backend: seconds per pass for each
/// method over one `DEFAULT`-accounted buffer, with optional per-node skew
/// factors multiplying the pass time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBandwidthScript {
    pub lib_fill_pass_seconds: f64,
    pub lib_copy_pass_seconds: f64,
    pub nt_fill_pass_seconds: f64,
    #[serde(default)]
    pub node_skew: BTreeMap<usize, f64>,
}

impl MockBandwidthScript {
    fn pass_seconds(&self, method: ProbeMethod, binding: NodeBinding) -> Result<f64> {
        let base = match method {
            ProbeMethod::LibFill => self.lib_fill_pass_seconds,
            ProbeMethod::LibCopy => self.lib_copy_pass_seconds,
            ProbeMethod::NtFill => self.nt_fill_pass_seconds,
        };
        if !(base > 0.0) {
            return Err(Error::MockScript(format!(
                "non-positive scripted pass time for {method}"
            )));
        }
        let skew = match binding {
            NodeBinding::Node(n) => self.node_skew.get(&n).copied().unwrap_or(1.0),
            NodeBinding::Interleaved => 1.0,
        };
        Ok(base * skew)
    }
}

pub enum BandwidthBackend {
    Hardware,
    Mock(MockBandwidthScript),
}

impl BandwidthBackend {
    pub fn is_mock(&self) -> bool {
        matches!(self, BandwidthBackend::Mock(_))
    }
}

/// Runs one probe: allocate and pre-touch the buffer(s) untimed, then
/// repeat barrier-fenced timed passes until both timing floors are met,
/// reporting the best pass.
pub fn run_probe(probe: &BandwidthProbe, backend: &BandwidthBackend) -> Result<BandwidthResult> {
    probe.validate()?;
    match backend {
        BandwidthBackend::Mock(script) => {
            let pass = script.pass_seconds(probe.method, probe.node_binding)?;
            let mut passes = 0u32;
            let mut total = 0.0;
            while total < probe.min_total_seconds || passes < MIN_PASSES {
                total += pass;
                passes += 1;
            }
            let bytes = probe.bytes_accounted_per_pass();
            Ok(BandwidthResult {
                probe: probe.clone(),
                gbps: bytes as f64 / pass / GIGA,
                bytes_accounted: bytes,
                elapsed_seconds: pass,
                passes,
            })
        }
        BandwidthBackend::Hardware => run_probe_hw(probe),
    }
}

fn alloc_probe_buffer(probe: &BandwidthProbe) -> Result<BoundBuffer> {
    match probe.node_binding {
        NodeBinding::Node(n) => BoundBuffer::bind(n, probe.buffer_bytes),
        NodeBinding::Interleaved => BoundBuffer::unbound(probe.buffer_bytes),
    }
}

fn run_probe_hw(probe: &BandwidthProbe) -> Result<BandwidthResult> {
    let mut main = alloc_probe_buffer(probe)?;
    let mut copy_dst = match probe.method {
        ProbeMethod::LibCopy => Some(alloc_probe_buffer(probe)?),
        _ => None,
    };

    let threads = probe.threads();
    let chunk = chunk_bounds(probe.buffer_bytes, threads);
    let barrier = Barrier::new(threads + 1);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);

    let src_ptr = main.as_mut_ptr() as usize;
    let dst_ptr = copy_dst.as_mut().map(|b| b.as_mut_ptr() as usize);

    let mut pass_times = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        for (i, &cpu) in probe.cpus.iter().enumerate() {
            let (lo, hi) = chunk[i];
            let barrier = &barrier;
            let stop = &stop;
            let failure = &failure;
            let method = probe.method;
            scope.spawn(move || {
                let run = || -> Result<()> {
                    pin_current_thread(cpu)?;
                    // Pre-touch: fault every page in before any timed pass.
                    unsafe {
                        std::ptr::write_bytes((src_ptr + lo) as *mut u8, 0x55, hi - lo);
                        if let Some(dst) = dst_ptr {
                            std::ptr::write_bytes((dst + lo) as *mut u8, 0x55, hi - lo);
                        }
                    }
                    loop {
                        barrier.wait();
                        if stop.load(Ordering::Acquire) {
                            return Ok(());
                        }
                        unsafe {
                            match method {
                                ProbeMethod::LibFill => {
                                    std::ptr::write_bytes((src_ptr + lo) as *mut u8, 0xA7, hi - lo)
                                }
                                ProbeMethod::LibCopy => std::ptr::copy_nonoverlapping(
                                    (src_ptr + lo) as *const u8,
                                    (dst_ptr.unwrap() + lo) as *mut u8,
                                    hi - lo,
                                ),
                                ProbeMethod::NtFill => {
                                    nt_fill((src_ptr + lo) as *mut u8, hi - lo)
                                }
                            }
                        }
                        let affinity = current_affinity()?;
                        if affinity != [cpu] {
                            return Err(Error::Binding(format!(
                                "probe worker migrated off cpu {cpu}: affinity {affinity:?}"
                            )));
                        }
                        barrier.wait();
                    }
                };
                if let Err(e) = run() {
                    *failure.lock().unwrap() = Some(e);
                    stop.store(true, Ordering::Release);
                    // Unblock the barrier protocol for everyone else.
                    barrier.wait();
                }
            });
        }

        let started = Instant::now();
        loop {
            barrier.wait(); // release workers into a pass
            if stop.load(Ordering::Acquire) {
                break;
            }
            let t0 = Instant::now();
            barrier.wait(); // workers finished the pass
            pass_times.push(t0.elapsed().as_secs_f64());
            let done = started.elapsed().as_secs_f64() >= probe.min_total_seconds
                && pass_times.len() as u32 >= MIN_PASSES;
            if done || failure.lock().unwrap().is_some() {
                stop.store(true, Ordering::Release);
                barrier.wait(); // final release so workers observe stop
                break;
            }
        }
        Ok(())
    })?;

    if let Some(e) = failure.lock().unwrap().take() {
        return Err(e);
    }
    let best = pass_times
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() || best <= 0.0 {
        return Err(Error::InvalidInput("no timed passes completed".into()));
    }
    let bytes = probe.bytes_accounted_per_pass();
    Ok(BandwidthResult {
        probe: probe.clone(),
        gbps: bytes as f64 / best / GIGA,
        bytes_accounted: bytes,
        elapsed_seconds: best,
        passes: pass_times.len() as u32,
    })
}

fn chunk_bounds(len: usize, threads: usize) -> Vec<(usize, usize)> {
    // 64-byte aligned chunk starts; the last chunk absorbs the remainder.
    let per = (len / threads) & !63;
    (0..threads)
        .map(|i| {
            let lo = i * per;
            let hi = if i + 1 == threads { len } else { (i + 1) * per };
            (lo, hi)
        })
        .collect()
}

/// Streaming stores over `len` bytes; the sub-line tail (and everything, on
/// a hypothetical non-SSE2 target) uses ordinary stores.
unsafe fn nt_fill(ptr: *mut u8, len: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::*;
        let v = _mm_set1_epi8(0x5Au8 as i8);
        let mut off = 0;
        let vec_end = len & !15;
        while off < vec_end {
            _mm_stream_si128(ptr.add(off).cast::<__m128i>(), v);
            off += 16;
        }
        if off < len {
            std::ptr::write_bytes(ptr.add(off), 0x5A, len - off);
        }
        _mm_sfence();
    }
    #[cfg(not(target_arch = "x86_64"))]
    std::ptr::write_bytes(ptr, 0x5A, len);
}

/// Max over the three methods for a single-node scenario; ties go to the
/// earliest method in declaration order. Any probe may fail (recorded as a
/// warning) as long as one survives.
pub fn peak_bandwidth(
    scenario: &Scenario,
    buffer_bytes: usize,
    backend: &BandwidthBackend,
) -> Result<NodePeak> {
    if scenario.kind == ScenarioKind::TwoSockets {
        return Err(Error::InvalidInput(
            "two-socket scenarios use the dual-group protocol (two_socket_bandwidth)".into(),
        ));
    }
    let node = *scenario
        .mem_nodes
        .first()
        .ok_or_else(|| Error::Topology("scenario has no memory node".into()))?;
    let mut peak = node_peak(
        node,
        &scenario.cpu_set,
        buffer_bytes,
        backend,
        NodeBinding::Node(node),
    )?;
    if scenario.kind == ScenarioKind::SingleThread && peak.method == ProbeMethod::NtFill {
        peak.warnings.push(
            "nt-fill won the single-thread scenario; prefetcher-assisted fill/copy usually \
             lead there, so the platform may be unusual or the run noisy"
                .into(),
        );
    }
    Ok(peak)
}

fn node_peak(
    node: usize,
    cpus: &[usize],
    buffer_bytes: usize,
    backend: &BandwidthBackend,
    binding: NodeBinding,
) -> Result<NodePeak> {
    let mut results = Vec::new();
    let mut warnings = Vec::new();
    for method in ProbeMethod::ALL {
        let probe = BandwidthProbe::new(method, buffer_bytes, cpus.to_vec(), binding);
        match run_probe(&probe, backend) {
            Ok(r) => results.push(r),
            Err(e) => warnings.push(format!("{method} probe failed: {e}")),
        }
    }
    let best = results
        .iter()
        .max_by(|a, b| a.gbps.partial_cmp(&b.gbps).expect("rates are finite"))
        .ok_or_else(|| Error::InvalidInput("all bandwidth probes failed".into()))?;
    // max_by returns the last maximum; scan in declaration order so ties
    // resolve to the earliest method.
    let winner = results
        .iter()
        .find(|r| r.gbps >= best.gbps)
        .expect("non-empty");
    Ok(NodePeak {
        node,
        gbps: winner.gbps,
        method: winner.probe.method,
        results: results.clone(),
        warnings,
    })
}

/// The dual-instance protocol: for a machine with two populated sockets,
/// run one fully node-bound probe group per node, concurrently, and sum the
/// per-node peaks.
pub fn two_socket_bandwidth(
    scenario: &Scenario,
    topo: &MachineTopology,
    buffer_bytes: usize,
    backend: &BandwidthBackend,
) -> Result<TwoSocketPeak> {
    if scenario.mem_nodes.len() < 2 {
        return Err(Error::Topology(
            "machine exposes one memory node; use the single-socket scenario".into(),
        ));
    }
    let groups: Vec<(usize, Vec<usize>)> = scenario
        .mem_nodes
        .iter()
        .map(|&node| {
            let cpus: Vec<usize> = topo
                .cpus_of_node(node)
                .into_iter()
                .filter(|c| scenario.cpu_set.contains(c))
                .collect();
            (node, cpus)
        })
        .collect();
    if groups.iter().any(|(_, cpus)| cpus.is_empty()) {
        return Err(Error::Topology(
            "a scenario memory node has no scenario CPUs".into(),
        ));
    }

    let nodes: Vec<NodePeak> = match backend {
        // Scripted timings need no real concurrency (nothing contends).
        BandwidthBackend::Mock(_) => groups
            .iter()
            .map(|(node, cpus)| {
                node_peak(*node, cpus, buffer_bytes, backend, NodeBinding::Node(*node))
            })
            .collect::<Result<Vec<_>>>()?,
        BandwidthBackend::Hardware => std::thread::scope(|scope| {
            let handles: Vec<_> = groups
                .iter()
                .map(|(node, cpus)| {
                    scope.spawn(move || {
                        node_peak(
                            *node,
                            cpus,
                            buffer_bytes,
                            &BandwidthBackend::Hardware,
                            NodeBinding::Node(*node),
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bandwidth group panicked"))
                .collect::<Result<Vec<_>>>()
        })?,
    };

    Ok(TwoSocketPeak {
        total_gbps: nodes.iter().map(|n| n.gbps).sum(),
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::MachineTopology;

    fn script(fill: f64, copy: f64, nt: f64) -> MockBandwidthScript {
        MockBandwidthScript {
            lib_fill_pass_seconds: fill,
            lib_copy_pass_seconds: copy,
            nt_fill_pass_seconds: nt,
            node_skew: BTreeMap::new(),
        }
    }

    fn probe(method: ProbeMethod) -> BandwidthProbe {
        BandwidthProbe::new(method, DEFAULT_BUFFER_BYTES, vec![0], NodeBinding::Node(0))
    }

    #[test]
    fn mock_rate_oracle() {
        // 0.5 GiB in 0.05 s = 10.73741824 GB/s exactly.
        let backend = BandwidthBackend::Mock(script(1.0, 1.0, 0.05));
        let r = run_probe(&probe(ProbeMethod::NtFill), &backend).unwrap();
        assert_eq!(r.gbps, 0.5 * f64::powi(2.0, 30) / 0.05 / 1e9);
        assert_eq!(r.gbps, 10.73741824);
        assert_eq!(r.bytes_accounted, 512 * 1024 * 1024);
        assert!(r.passes >= MIN_PASSES);
    }

    #[test]
    fn copy_accounts_twice_the_fill_bytes() {
        let backend = BandwidthBackend::Mock(script(0.05, 0.05, 1.0));
        let fill = run_probe(&probe(ProbeMethod::LibFill), &backend).unwrap();
        let copy = run_probe(&probe(ProbeMethod::LibCopy), &backend).unwrap();
        assert_eq!(copy.bytes_accounted, 2 * fill.bytes_accounted);
        assert_eq!(copy.gbps, 2.0 * fill.gbps);
    }

    #[test]
    fn undersized_buffer_rejected() {
        let mut p = probe(ProbeMethod::LibFill);
        p.buffer_bytes = 0;
        assert!(run_probe(&p, &BandwidthBackend::Mock(script(1.0, 1.0, 1.0))).is_err());
        p.buffer_bytes = MIN_BUFFER_BYTES - 1;
        assert!(p.validate().is_err());
    }

    fn scenario_1s() -> (MachineTopology, Scenario) {
        let topo = MachineTopology::synthetic(1, 4, 1, 1 << 20).unwrap();
        let s = Scenario::single_socket(&topo).unwrap();
        (topo, s)
    }

    #[test]
    fn selection_takes_the_maximum() {
        let (_, s) = scenario_1s();
        // Rates: fill 10.7, copy 2x(0.5GiB)/0.1 = 10.7, nt 0.5/0.06 = 8.9.
        // Equal fill/copy rates break toward LibFill by declaration order.
        let backend = BandwidthBackend::Mock(script(0.05, 0.10, 0.06));
        let peak = peak_bandwidth(&s, DEFAULT_BUFFER_BYTES, &backend).unwrap();
        assert_eq!(peak.method, ProbeMethod::LibFill);
        assert_eq!(peak.gbps, 10.73741824);
        assert_eq!(peak.results.len(), 3);

        // A faster copy pass wins outright.
        let backend = BandwidthBackend::Mock(script(0.05, 0.08, 0.06));
        let peak = peak_bandwidth(&s, DEFAULT_BUFFER_BYTES, &backend).unwrap();
        assert_eq!(peak.method, ProbeMethod::LibCopy);
    }

    #[test]
    fn nt_win_on_single_thread_is_flagged() {
        let topo = MachineTopology::synthetic(1, 4, 1, 1 << 20).unwrap();
        let s = Scenario::single_thread(&topo).unwrap();
        let backend = BandwidthBackend::Mock(script(0.10, 0.30, 0.05));
        let peak = peak_bandwidth(&s, DEFAULT_BUFFER_BYTES, &backend).unwrap();
        assert_eq!(peak.method, ProbeMethod::NtFill);
        assert!(peak.warnings.iter().any(|w| w.contains("single-thread")), "{:?}", peak.warnings);
    }

    #[test]
    fn two_socket_sums_per_node_peaks() {
        let topo = MachineTopology::synthetic(2, 2, 1, 1 << 20).unwrap();
        let s = Scenario::two_sockets(&topo).unwrap();
        let backend = BandwidthBackend::Mock(script(0.05, 1.0, 1.0));
        let peak = two_socket_bandwidth(&s, &topo, DEFAULT_BUFFER_BYTES, &backend).unwrap();
        assert_eq!(peak.nodes.len(), 2);
        // Symmetric nodes: exactly twice one node's figure.
        assert_eq!(peak.total_gbps, 2.0 * peak.nodes[0].gbps);

        // Skewed node 1 runs 10% slower; the result is still the sum.
        let mut skewed = script(0.05, 1.0, 1.0);
        skewed.node_skew.insert(1, 1.1);
        let backend = BandwidthBackend::Mock(skewed);
        let peak = two_socket_bandwidth(&s, &topo, DEFAULT_BUFFER_BYTES, &backend).unwrap();
        let expect0 = 0.5 * f64::powi(2.0, 30) / 0.05 / 1e9;
        let expect1 = 0.5 * f64::powi(2.0, 30) / (0.05 * 1.1) / 1e9;
        assert_eq!(peak.nodes[0].gbps, expect0);
        assert_eq!(peak.nodes[1].gbps, expect1);
        assert_eq!(peak.total_gbps, expect0 + expect1);
        assert!(peak.total_gbps > 2.0 * expect1 && peak.total_gbps < 2.0 * expect0);
    }

    #[test]
    fn two_socket_requires_two_nodes() {
        let (topo, s) = scenario_1s();
        let backend = BandwidthBackend::Mock(script(0.05, 1.0, 1.0));
        let err = two_socket_bandwidth(&s, &topo, DEFAULT_BUFFER_BYTES, &backend).unwrap_err();
        assert!(err.to_string().contains("single-socket"), "{err}");
    }

    #[test]
    fn peak_bandwidth_rejects_two_socket_scenario() {
        let topo = MachineTopology::synthetic(2, 2, 1, 1 << 20).unwrap();
        let s = Scenario::two_sockets(&topo).unwrap();
        let backend = BandwidthBackend::Mock(script(0.05, 1.0, 1.0));
        assert!(peak_bandwidth(&s, DEFAULT_BUFFER_BYTES, &backend).is_err());
    }

    #[test]
    fn chunking_is_aligned_and_total() {
        let chunks = chunk_bounds(1000, 3);
        assert_eq!(chunks[0], (0, 320));
        assert_eq!(chunks[1], (320, 640));
        assert_eq!(chunks[2], (640, 1000));
        assert!(chunks.iter().all(|&(lo, _)| lo % 64 == 0));
    }

    #[test]
    fn buffer_scaling_is_linear() {
        let backend = BandwidthBackend::Mock(script(1.0, 1.0, 0.05));
        let mut small = probe(ProbeMethod::NtFill);
        small.buffer_bytes = MIN_BUFFER_BYTES;
        let mut large = probe(ProbeMethod::NtFill);
        large.buffer_bytes = 4 * MIN_BUFFER_BYTES;
        let a = run_probe(&small, &backend).unwrap();
        let b = run_probe(&large, &backend).unwrap();
        assert_eq!(b.bytes_accounted, 4 * a.bytes_accounted);
    }
}
