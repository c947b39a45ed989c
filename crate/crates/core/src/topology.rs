//! CPU, socket and memory-node discovery, thread pinning and node-bound
//! allocation.
//!
//! Scenarios ("single thread", "single socket", "two sockets") only mean
//! something when threads and pages actually live where the scenario says.
//! This module reads the sysfs topology tree (or a committed fixture snapshot
//! of one), pins threads with `sched_setaffinity`, and binds allocations with
//! `mbind` — the in-process equivalent of driving the run under `numactl`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fallback when sysfs does not expose the L3 size (28 MiB, typical for a
/// 20-core server part).
pub const LLC_FALLBACK_BYTES: u64 = 28 * 1024 * 1024;

/// Resource envelope for one benchmark or measurement run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    SingleThread,
    SingleSocket,
    TwoSockets,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::SingleThread,
        ScenarioKind::SingleSocket,
        ScenarioKind::TwoSockets,
    ];

    /// Flag spelling used by the CLI and in result documents.
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::SingleThread => "single-thread",
            ScenarioKind::SingleSocket => "single-socket",
            ScenarioKind::TwoSockets => "two-sockets",
        }
    }

    /// Human form used in plot titles.
    pub fn title_text(&self) -> &'static str {
        match self {
            ScenarioKind::SingleThread => "single core",
            ScenarioKind::SingleSocket => "single socket",
            ScenarioKind::TwoSockets => "two sockets",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-thread" => Ok(ScenarioKind::SingleThread),
            "single-socket" => Ok(ScenarioKind::SingleSocket),
            "two-sockets" => Ok(ScenarioKind::TwoSockets),
            other => Err(Error::InvalidInput(format!(
                "unknown scenario '{other}' (expected single-thread, single-socket or two-sockets)"
            ))),
        }
    }
}

/// A concrete resource scenario: which logical CPUs run and which memory
/// nodes hold the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub cpu_set: Vec<usize>,
    pub mem_nodes: Vec<usize>,
}

impl Scenario {
    /// Builds the scenario of `kind` from a discovered topology, or fails
    /// with a diagnostic when the machine cannot host it as defined.
    pub fn for_kind(kind: ScenarioKind, topo: &MachineTopology) -> Result<Scenario> {
        match kind {
            ScenarioKind::SingleThread => Self::single_thread(topo),
            ScenarioKind::SingleSocket => Self::single_socket(topo),
            ScenarioKind::TwoSockets => Self::two_sockets(topo),
        }
    }

    /// One CPU, the memory node it lives on.
    pub fn single_thread(topo: &MachineTopology) -> Result<Scenario> {
        let cpu = *topo
            .cpu_map
            .keys()
            .next()
            .ok_or_else(|| Error::Topology("no CPUs discovered".into()))?;
        let node = topo.node_of_cpu(cpu).unwrap_or(0);
        Ok(Scenario {
            kind: ScenarioKind::SingleThread,
            cpu_set: vec![cpu],
            mem_nodes: vec![node],
        })
    }

    /// All CPUs of the first socket, bound to that socket's node.
    pub fn single_socket(topo: &MachineTopology) -> Result<Scenario> {
        let socket = topo
            .socket_ids()
            .into_iter()
            .next()
            .ok_or_else(|| Error::Topology("no sockets discovered".into()))?;
        let cpu_set = topo.cpus_of_socket(socket);
        let mut nodes: Vec<usize> = cpu_set
            .iter()
            .map(|&c| topo.node_of_cpu(c).unwrap_or(0))
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.len() != 1 {
            return Err(Error::Topology(format!(
                "socket {socket} spans memory nodes {nodes:?}; single-socket scenario \
                 requires one node per socket"
            )));
        }
        Ok(Scenario {
            kind: ScenarioKind::SingleSocket,
            cpu_set,
            mem_nodes: nodes,
        })
    }

    /// All CPUs of exactly two sockets, each socket's node included.
    pub fn two_sockets(topo: &MachineTopology) -> Result<Scenario> {
        let sockets = topo.socket_ids();
        if sockets.len() < 2 {
            return Err(Error::Topology(format!(
                "two-sockets scenario needs 2 sockets, machine has {}; \
                 use single-socket or single-thread instead",
                sockets.len()
            )));
        }
        if sockets.len() > 2 {
            return Err(Error::Topology(format!(
                "machine has {} sockets; the two-sockets protocol is defined for exactly 2",
                sockets.len()
            )));
        }
        let mut cpu_set = Vec::new();
        let mut mem_nodes = Vec::new();
        for socket in sockets {
            let cpus = topo.cpus_of_socket(socket);
            let mut nodes: Vec<usize> = cpus
                .iter()
                .map(|&c| topo.node_of_cpu(c).unwrap_or(0))
                .collect();
            nodes.sort_unstable();
            nodes.dedup();
            if nodes.len() != 1 {
                return Err(Error::Topology(format!(
                    "socket {socket} spans memory nodes {nodes:?}"
                )));
            }
            cpu_set.extend(cpus);
            mem_nodes.push(nodes[0]);
        }
        mem_nodes.sort_unstable();
        mem_nodes.dedup();
        if mem_nodes.len() != 2 {
            return Err(Error::Topology(format!(
                "two sockets share memory nodes {mem_nodes:?}; need one node per socket"
            )));
        }
        Ok(Scenario {
            kind: ScenarioKind::TwoSockets,
            cpu_set,
            mem_nodes,
        })
    }

    pub fn thread_count(&self) -> usize {
        self.cpu_set.len()
    }

    /// Checks the structural invariants of the scenario against a topology.
    pub fn validate(&self, topo: &MachineTopology) -> Result<()> {
        match self.kind {
            ScenarioKind::SingleThread => {
                if self.cpu_set.len() != 1 {
                    return Err(Error::InvalidInput(format!(
                        "single-thread scenario must have exactly 1 CPU, got {}",
                        self.cpu_set.len()
                    )));
                }
            }
            ScenarioKind::SingleSocket => {
                let sockets: Vec<_> = self
                    .cpu_set
                    .iter()
                    .filter_map(|&c| topo.cpu_socket(c))
                    .collect();
                if sockets.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::InvalidInput(
                        "single-socket scenario CPUs span multiple sockets".into(),
                    ));
                }
            }
            ScenarioKind::TwoSockets => {
                let mut sockets: Vec<_> = self
                    .cpu_set
                    .iter()
                    .filter_map(|&c| topo.cpu_socket(c))
                    .collect();
                sockets.sort_unstable();
                sockets.dedup();
                if sockets.len() != 2 {
                    return Err(Error::InvalidInput(format!(
                        "two-sockets scenario spans {} sockets",
                        sockets.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything discover() learns about the machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineTopology {
    /// logical cpu -> (socket id, core id)
    pub cpu_map: BTreeMap<usize, (usize, usize)>,
    /// memory node -> logical cpus
    pub node_cpus: BTreeMap<usize, Vec<usize>>,
    /// L3 size per socket in bytes.
    pub llc_bytes: u64,
    /// Non-fatal oddities found during discovery.
    pub warnings: Vec<String>,
}

impl MachineTopology {
    /// Reads the live sysfs tree.
    pub fn discover() -> Result<MachineTopology> {
        Self::discover_from(Path::new("/sys"))
    }

    /// Reads a sysfs-style tree rooted at `root`. Fixture snapshots committed
    /// under test data parse identically to a live system.
    pub fn discover_from(root: &Path) -> Result<MachineTopology> {
        let cpu_dir = root.join("devices/system/cpu");
        let online = read_trimmed(&cpu_dir.join("online"))?;
        let cpus = parse_cpu_list(&online)?;
        if cpus.is_empty() {
            return Err(Error::Topology(format!(
                "no online CPUs listed in {}",
                cpu_dir.join("online").display()
            )));
        }

        let mut warnings = Vec::new();
        let mut cpu_map = BTreeMap::new();
        for &cpu in &cpus {
            let base = cpu_dir.join(format!("cpu{cpu}/topology"));
            let socket: usize = read_trimmed(&base.join("physical_package_id"))?
                .parse()
                .map_err(|e| Error::Topology(format!("cpu{cpu} physical_package_id: {e}")))?;
            let core: usize = read_trimmed(&base.join("core_id"))?
                .parse()
                .map_err(|e| Error::Topology(format!("cpu{cpu} core_id: {e}")))?;
            cpu_map.insert(cpu, (socket, core));
        }

        let mut node_cpus = BTreeMap::new();
        let node_dir = root.join("devices/system/node");
        if node_dir.is_dir() {
            for entry in fs::read_dir(&node_dir)? {
                let entry = entry?;
                let name = entry.file_name();
                let name = name.to_string_lossy();
                let Some(id_str) = name.strip_prefix("node") else {
                    continue;
                };
                let Ok(node_id) = id_str.parse::<usize>() else {
                    continue;
                };
                let cpulist = read_trimmed(&entry.path().join("cpulist"))?;
                node_cpus.insert(node_id, parse_cpu_list(&cpulist)?);
            }
        }
        if node_cpus.is_empty() {
            warnings.push("no NUMA node information; assuming one node".into());
            node_cpus.insert(0, cpus.clone());
        }

        let llc_bytes = match read_llc_bytes(&cpu_dir, cpus[0]) {
            Some(bytes) => bytes,
            None => {
                warnings.push(format!(
                    "L3 size not exposed by sysfs; assuming {} MiB",
                    LLC_FALLBACK_BYTES / (1024 * 1024)
                ));
                LLC_FALLBACK_BYTES
            }
        };

        Ok(MachineTopology {
            cpu_map,
            node_cpus,
            llc_bytes,
            warnings,
        })
    }

    /// Synthesizes a topology from explicit counts (used by the mock backend).
    pub fn synthetic(
        sockets: usize,
        cores_per_socket: usize,
        threads_per_core: usize,
        llc_bytes: u64,
    ) -> Result<MachineTopology> {
        if sockets == 0 || cores_per_socket == 0 || threads_per_core == 0 || llc_bytes == 0 {
            return Err(Error::InvalidInput(
                "synthetic topology counts must all be positive".into(),
            ));
        }
        let mut cpu_map = BTreeMap::new();
        let mut node_cpus: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut cpu = 0;
        for socket in 0..sockets {
            for core in 0..cores_per_socket {
                for _ in 0..threads_per_core {
                    cpu_map.insert(cpu, (socket, core));
                    node_cpus.entry(socket).or_default().push(cpu);
                    cpu += 1;
                }
            }
        }
        Ok(MachineTopology {
            cpu_map,
            node_cpus,
            llc_bytes,
            warnings: Vec::new(),
        })
    }

    pub fn logical_cpus(&self) -> usize {
        self.cpu_map.len()
    }

    /// All online CPU ids, ascending.
    pub fn cpu_ids(&self) -> Vec<usize> {
        self.cpu_map.keys().copied().collect()
    }

    pub fn socket_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.cpu_map.values().map(|&(s, _)| s).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn sockets(&self) -> usize {
        self.socket_ids().len()
    }

    pub fn cpu_socket(&self, cpu: usize) -> Option<usize> {
        self.cpu_map.get(&cpu).map(|&(s, _)| s)
    }

    pub fn cpu_core(&self, cpu: usize) -> Option<usize> {
        self.cpu_map.get(&cpu).map(|&(_, c)| c)
    }

    pub fn cpus_of_socket(&self, socket: usize) -> Vec<usize> {
        self.cpu_map
            .iter()
            .filter(|&(_, &(s, _))| s == socket)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn node_of_cpu(&self, cpu: usize) -> Option<usize> {
        self.node_cpus
            .iter()
            .find(|(_, cpus)| cpus.contains(&cpu))
            .map(|(&n, _)| n)
    }

    pub fn node_ids(&self) -> Vec<usize> {
        self.node_cpus.keys().copied().collect()
    }

    pub fn cpus_of_node(&self, node: usize) -> Vec<usize> {
        self.node_cpus.get(&node).cloned().unwrap_or_default()
    }

    /// Keeps one logical CPU per physical core (lowest id wins).
    pub fn one_cpu_per_core(&self, cpu_set: &[usize]) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for &cpu in cpu_set {
            if let Some(&key) = self.cpu_map.get(&cpu) {
                if seen.insert(key) {
                    out.push(cpu);
                }
            }
        }
        out
    }
}

fn read_trimmed(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map(|s| s.trim().to_string())
        .map_err(|e| Error::Topology(format!("{}: {e}", path.display())))
}

/// Parses sysfs cpulist syntax: "0-3,8,10-11".
pub fn parse_cpu_list(list: &str) -> Result<Vec<usize>> {
    let mut cpus = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo
                    .parse()
                    .map_err(|e| Error::Topology(format!("cpulist '{part}': {e}")))?;
                let hi: usize = hi
                    .parse()
                    .map_err(|e| Error::Topology(format!("cpulist '{part}': {e}")))?;
                if hi < lo {
                    return Err(Error::Topology(format!("cpulist range '{part}' inverted")));
                }
                cpus.extend(lo..=hi);
            }
            None => cpus.push(
                part.parse()
                    .map_err(|e| Error::Topology(format!("cpulist '{part}': {e}")))?,
            ),
        }
    }
    cpus.sort_unstable();
    cpus.dedup();
    Ok(cpus)
}

fn read_llc_bytes(cpu_dir: &Path, cpu: usize) -> Option<u64> {
    let cache_dir = cpu_dir.join(format!("cpu{cpu}/cache"));
    for idx in 0..=4u32 {
        let index = cache_dir.join(format!("index{idx}"));
        let Ok(level) = fs::read_to_string(index.join("level")) else {
            continue;
        };
        if level.trim() == "3" {
            let size = fs::read_to_string(index.join("size")).ok()?;
            return parse_cache_size(size.trim());
        }
    }
    None
}

/// Parses sysfs cache size syntax: "28160K", "36M", "512".
fn parse_cache_size(s: &str) -> Option<u64> {
    let (digits, mult) = match s.as_bytes().last()? {
        b'K' | b'k' => (&s[..s.len() - 1], 1024),
        b'M' | b'm' => (&s[..s.len() - 1], 1024 * 1024),
        b'G' | b'g' => (&s[..s.len() - 1], 1024 * 1024 * 1024),
        _ => (s, 1),
    };
    digits.parse::<u64>().ok().map(|n| n * mult)
}

// ---------------------------------------------------------------------------
// Thread pinning
// ---------------------------------------------------------------------------

/// Pins the calling thread to exactly `cpu` and returns the affinity
/// readback, which contains exactly that CPU on success.
#[cfg(target_os = "linux")]
pub fn pin_current_thread(cpu: usize) -> Result<Vec<usize>> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        if cpu >= libc::CPU_SETSIZE as usize {
            return Err(Error::Binding(format!("cpu {cpu} exceeds CPU_SETSIZE")));
        }
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(Error::Binding(format!(
                "sched_setaffinity(cpu {cpu}): {}",
                std::io::Error::last_os_error()
            )));
        }
    }
    let readback = current_affinity()?;
    if readback != [cpu] {
        return Err(Error::Binding(format!(
            "pin to cpu {cpu} did not stick; affinity readback {readback:?}"
        )));
    }
    Ok(readback)
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_cpu: usize) -> Result<Vec<usize>> {
    Err(Error::Binding(
        "thread pinning is only supported on Linux".into(),
    ))
}

/// Reads back the calling thread's affinity mask as a CPU list.
#[cfg(target_os = "linux")]
pub fn current_affinity() -> Result<Vec<usize>> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return Err(Error::Binding(format!(
                "sched_getaffinity: {}",
                std::io::Error::last_os_error()
            )));
        }
        let mut cpus = Vec::new();
        for cpu in 0..libc::CPU_SETSIZE as usize {
            if libc::CPU_ISSET(cpu, &set) {
                cpus.push(cpu);
            }
        }
        Ok(cpus)
    }
}

#[cfg(not(target_os = "linux"))]
pub fn current_affinity() -> Result<Vec<usize>> {
    Err(Error::Binding(
        "affinity readback is only supported on Linux".into(),
    ))
}

// ---------------------------------------------------------------------------
// Node-bound allocation
// ---------------------------------------------------------------------------

/// Fraction of sampled pages that must sit on the requested node for a
/// strict binding to count as verified.
const BIND_VERIFY_FRACTION: f64 = 0.95;
const BIND_SAMPLE_PAGES: usize = 64;

/// A page-aligned buffer whose pages are bound to one memory node.
///
/// Strict policy: construction fails rather than letting pages spill to
/// another node. The mock constructor skips the binding syscalls and only
/// tags the buffer, for tests and the scripted backend.
pub struct BoundBuffer {
    ptr: *mut u8,
    len: usize,
    node: usize,
    verified_fraction: Option<f64>,
}

// The buffer is plain memory; the raw pointer is owned exclusively.
unsafe impl Send for BoundBuffer {}
unsafe impl Sync for BoundBuffer {}

impl BoundBuffer {
    /// mmap + strict `mbind` to `node`, fault pages in, then verify page
    /// placement on a sample of pages via `move_pages`.
    #[cfg(target_os = "linux")]
    pub fn bind(node: usize, bytes: usize) -> Result<BoundBuffer> {
        if bytes == 0 {
            return Err(Error::InvalidInput("zero-length buffer".into()));
        }
        let ptr = map_anonymous(bytes)?;

        const MPOL_BIND: libc::c_int = 2;
        const MPOL_MF_STRICT: libc::c_ulong = 1;
        if node >= 64 {
            unsafe { libc::munmap(ptr.cast(), bytes) };
            return Err(Error::Binding(format!("node {node} out of nodemask range")));
        }
        let nodemask: libc::c_ulong = 1 << node;
        let rc = unsafe {
            libc::syscall(
                libc::SYS_mbind,
                ptr as libc::c_ulong,
                bytes as libc::c_ulong,
                MPOL_BIND,
                &nodemask as *const libc::c_ulong,
                64usize + 1, // maxnode counts bits, one past the highest
                MPOL_MF_STRICT,
            )
        };
        if rc != 0 {
            let err = std::io::Error::last_os_error();
            unsafe { libc::munmap(ptr.cast(), bytes) };
            return Err(Error::Binding(format!(
                "mbind to node {node} failed: {err} (node missing or not enough node-local memory)"
            )));
        }

        // Fault every page in under the bound policy.
        let page = page_size();
        unsafe {
            let mut off = 0;
            while off < bytes {
                ptr.add(off).write_volatile(0);
                off += page;
            }
        }

        let mut buf = BoundBuffer {
            ptr,
            len: bytes,
            node,
            verified_fraction: None,
        };
        let fraction = buf.sample_node_fraction()?;
        if fraction < BIND_VERIFY_FRACTION {
            return Err(Error::Binding(format!(
                "only {:.0}% of sampled pages landed on node {node}",
                fraction * 100.0
            )));
        }
        buf.verified_fraction = Some(fraction);
        Ok(buf)
    }

    #[cfg(not(target_os = "linux"))]
    pub fn bind(_node: usize, _bytes: usize) -> Result<BoundBuffer> {
        Err(Error::Binding(
            "node binding is only supported on Linux".into(),
        ))
    }

    /// Allocation without binding syscalls, tagged with `node`.
    pub fn mock(node: usize, bytes: usize) -> Result<BoundBuffer> {
        if bytes == 0 {
            return Err(Error::InvalidInput("zero-length buffer".into()));
        }
        let ptr = map_anonymous(bytes)?;
        Ok(BoundBuffer {
            ptr,
            len: bytes,
            node,
            verified_fraction: None,
        })
    }

    /// Allocation with no memory policy; pages land wherever first touch
    /// puts them. The node tag is meaningless here.
    pub fn unbound(bytes: usize) -> Result<BoundBuffer> {
        BoundBuffer::mock(0, bytes)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr
    }

    pub fn as_mut_ptr(&mut self) -> *mut u8 {
        self.ptr
    }

    pub fn as_slice(&self) -> &[u8] {
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.len) }
    }

    /// Fraction of sampled pages verified on the requested node, when strict
    /// binding ran.
    pub fn verified_fraction(&self) -> Option<f64> {
        self.verified_fraction
    }

    /// Queries page placement for an evenly spread sample of pages.
    #[cfg(target_os = "linux")]
    fn sample_node_fraction(&self) -> Result<f64> {
        let page = page_size();
        let pages = self.len.div_ceil(page);
        let sample = pages.min(BIND_SAMPLE_PAGES);
        let stride = pages / sample;
        let addrs: Vec<*mut libc::c_void> = (0..sample)
            .map(|i| unsafe { self.ptr.add(i * stride * page).cast() })
            .collect();
        let mut status = vec![-1 as libc::c_int; sample];
        let rc = unsafe {
            libc::syscall(
                libc::SYS_move_pages,
                0 as libc::pid_t,
                sample as libc::c_ulong,
                addrs.as_ptr(),
                std::ptr::null::<libc::c_int>(), // nodes=NULL: query placement
                status.as_mut_ptr(),
                0 as libc::c_int,
            )
        };
        if rc != 0 {
            return Err(Error::Binding(format!(
                "move_pages placement query failed: {}",
                std::io::Error::last_os_error()
            )));
        }
        let on_node = status.iter().filter(|&&s| s == self.node as i32).count();
        Ok(on_node as f64 / sample as f64)
    }
}

impl Drop for BoundBuffer {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.cast(), self.len);
        }
    }
}

pub(crate) fn page_size() -> usize {
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize }
}

pub(crate) fn map_anonymous(bytes: usize) -> Result<*mut u8> {
    let ptr = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            bytes,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(Error::Binding(format!(
            "mmap({bytes} bytes): {}",
            std::io::Error::last_os_error()
        )));
    }
    Ok(ptr.cast())
}

/// Locates the committed sysfs fixture snapshots by name.
pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/sysfs")
        .join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_list_parses_ranges_and_singles() {
        assert_eq!(parse_cpu_list("0-3,8,10-11").unwrap(), vec![0, 1, 2, 3, 8, 10, 11]);
        assert_eq!(parse_cpu_list("0").unwrap(), vec![0]);
        assert_eq!(parse_cpu_list("").unwrap(), Vec::<usize>::new());
        assert!(parse_cpu_list("5-2").is_err());
        assert!(parse_cpu_list("x").is_err());
    }

    #[test]
    fn cache_size_suffixes() {
        assert_eq!(parse_cache_size("28160K"), Some(28160 * 1024));
        assert_eq!(parse_cache_size("36M"), Some(36 * 1024 * 1024));
        assert_eq!(parse_cache_size("512"), Some(512));
        assert_eq!(parse_cache_size(""), None);
    }

    #[test]
    fn synthetic_topology_shape() {
        let topo = MachineTopology::synthetic(2, 4, 2, 1 << 20).unwrap();
        assert_eq!(topo.logical_cpus(), 16);
        assert_eq!(topo.sockets(), 2);
        assert_eq!(topo.cpus_of_socket(0).len(), 8);
        assert_eq!(topo.node_of_cpu(9), Some(1));
        // One CPU per core halves an SMT-2 set.
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(topo.one_cpu_per_core(&all).len(), 8);
    }

    #[test]
    fn scenarios_from_synthetic_topology() {
        let topo = MachineTopology::synthetic(2, 2, 1, 1 << 20).unwrap();
        let st = Scenario::single_thread(&topo).unwrap();
        assert_eq!(st.cpu_set, vec![0]);
        assert_eq!(st.mem_nodes, vec![0]);
        st.validate(&topo).unwrap();

        let ss = Scenario::single_socket(&topo).unwrap();
        assert_eq!(ss.cpu_set, vec![0, 1]);
        assert_eq!(ss.mem_nodes, vec![0]);
        ss.validate(&topo).unwrap();

        let ts = Scenario::two_sockets(&topo).unwrap();
        assert_eq!(ts.cpu_set, vec![0, 1, 2, 3]);
        assert_eq!(ts.mem_nodes, vec![0, 1]);
        ts.validate(&topo).unwrap();
    }

    #[test]
    fn two_sockets_fails_on_single_socket_machine() {
        let topo = MachineTopology::synthetic(1, 4, 1, 1 << 20).unwrap();
        let err = Scenario::two_sockets(&topo).unwrap_err();
        assert!(err.to_string().contains("single-socket"));
    }

    #[test]
    fn mock_buffer_is_tagged_and_writable() {
        let mut buf = BoundBuffer::mock(1, 4096).unwrap();
        assert_eq!(buf.node(), 1);
        buf.as_mut_slice()[4095] = 7;
        assert_eq!(buf.as_slice()[4095], 7);
        assert_eq!(buf.verified_fraction(), None);
    }

    #[test]
    fn zero_length_buffer_rejected() {
        assert!(BoundBuffer::mock(0, 0).is_err());
    }

    #[test]
    fn scenario_kind_round_trips_through_flag_spelling() {
        for kind in ScenarioKind::ALL {
            assert_eq!(kind.as_str().parse::<ScenarioKind>().unwrap(), kind);
        }
        assert!("both-sockets".parse::<ScenarioKind>().is_err());
    }
}
