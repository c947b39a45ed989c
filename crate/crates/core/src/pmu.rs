//! Scoped hardware-counter access.
//!
//! Work comes from the FP_ARITH_INST_RETIRED.*_SINGLE core events (opened on
//! the calling thread group with inheritance, so spawned workers are
//! counted), traffic from the IMC uncore CAS_COUNT events (system-wide;
//! memory-controller counters see the whole platform, not one core). The
//! conversion rules live here too: lane weights 1/4/8/16 for scalar/128/256/
//! 512-bit single-precision counts, 64 bytes per CAS event, and the two-run
//! overhead subtraction.
//!
//! A scripted mock backend replays pre-recorded samples in order, which makes
//! everything downstream a pure function of the script.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per CAS transaction (one cache line on every targeted x86 part).
pub const CACHE_LINE_BYTES: u64 = 64;

/// Which counters were actually available when a sample was taken.
///
/// Unavailable counters are masked, never zero-faked: a masked field means
/// "unknown", and conversions that need it fail instead of returning 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterMask {
    pub scalar_single: bool,
    pub packed_128: bool,
    pub packed_256: bool,
    pub packed_512: bool,
    pub imc: bool,
}

impl CounterMask {
    pub const ALL: CounterMask = CounterMask {
        scalar_single: true,
        packed_128: true,
        packed_256: true,
        packed_512: true,
        imc: true,
    };
    pub const NONE: CounterMask = CounterMask {
        scalar_single: false,
        packed_128: false,
        packed_256: false,
        packed_512: false,
        imc: false,
    };

    /// True when every FP lane counter is available (work is measurable).
    pub fn fp_complete(&self) -> bool {
        self.scalar_single && self.packed_128 && self.packed_256 && self.packed_512
    }

    pub fn intersect(&self, other: &CounterMask) -> CounterMask {
        CounterMask {
            scalar_single: self.scalar_single && other.scalar_single,
            packed_128: self.packed_128 && other.packed_128,
            packed_256: self.packed_256 && other.packed_256,
            packed_512: self.packed_512 && other.packed_512,
            imc: self.imc && other.imc,
        }
    }
}

impl Default for CounterMask {
    fn default() -> Self {
        CounterMask::ALL
    }
}

/// One scope's worth of counter deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSample {
    #[serde(default)]
    pub scalar_single: u64,
    #[serde(default)]
    pub packed_128: u64,
    #[serde(default)]
    pub packed_256: u64,
    #[serde(default)]
    pub packed_512: u64,
    #[serde(default)]
    pub imc_cas_reads: u64,
    #[serde(default)]
    pub imc_cas_writes: u64,
    #[serde(default)]
    pub valid_mask: CounterMask,
}

impl CounterSample {
    pub fn zero(mask: CounterMask) -> CounterSample {
        CounterSample {
            valid_mask: mask,
            ..CounterSample::default()
        }
    }

    /// Field-wise sum; the mask intersects (a field is only trustworthy when
    /// both inputs had it).
    pub fn combined(&self, other: &CounterSample) -> CounterSample {
        CounterSample {
            scalar_single: self.scalar_single.saturating_add(other.scalar_single),
            packed_128: self.packed_128.saturating_add(other.packed_128),
            packed_256: self.packed_256.saturating_add(other.packed_256),
            packed_512: self.packed_512.saturating_add(other.packed_512),
            imc_cas_reads: self.imc_cas_reads.saturating_add(other.imc_cas_reads),
            imc_cas_writes: self.imc_cas_writes.saturating_add(other.imc_cas_writes),
            valid_mask: self.valid_mask.intersect(&other.valid_mask),
        }
    }
}

/// Counter deltas plus the wall time of the sampled region. Timing lives
/// with the sample so the scripted backend can control both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScopedSample {
    pub sample: CounterSample,
    pub elapsed_seconds: f64,
}

/// What the sampled region is, from the measurement protocol's point of
/// view. The scripted backend replays a runtime only for Execute regions;
/// hardware ignores the distinction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Overhead,
    Execute,
}

// ---------------------------------------------------------------------------
// Conversions
// ---------------------------------------------------------------------------

/// Lane-weighted FLOP count: scalar×1 + 128-bit×4 + 256-bit×8 + 512-bit×16.
///
/// FMA's factor of two is already inside the raw counts (one FMA retirement
/// bumps its counter by two), so no extra doubling happens here.
pub fn flops_from_sample(s: &CounterSample) -> Result<u64> {
    if !s.valid_mask.fp_complete() {
        return Err(Error::Counters(
            "work not measurable: FP counters masked".into(),
        ));
    }
    Ok(s.scalar_single
        + s.packed_128 * 4
        + s.packed_256 * 8
        + s.packed_512 * 16)
}

/// Bytes through the memory controllers: (CAS reads + CAS writes) × 64.
pub fn traffic_from_sample(s: &CounterSample) -> Result<u64> {
    if !s.valid_mask.imc {
        return Err(Error::Counters(
            "traffic not measurable: IMC counters masked".into(),
        ));
    }
    Ok((s.imc_cas_reads + s.imc_cas_writes) * CACHE_LINE_BYTES)
}

/// Per-field saturating subtraction of the init-only sample from the full
/// sample. Counter noise can invert tiny deltas, so negative results clamp
/// to 0; the flag reports whether any clamp fired.
pub fn subtract_overhead(
    full: &CounterSample,
    init_only: &CounterSample,
) -> Result<(CounterSample, bool)> {
    if full.valid_mask != init_only.valid_mask {
        return Err(Error::Counters(format!(
            "overhead subtraction with mismatched masks: {:?} vs {:?}",
            full.valid_mask, init_only.valid_mask
        )));
    }
    let mut clamped = false;
    let mut sub = |a: u64, b: u64| {
        if b > a {
            clamped = true;
            0
        } else {
            a - b
        }
    };
    let out = CounterSample {
        scalar_single: sub(full.scalar_single, init_only.scalar_single),
        packed_128: sub(full.packed_128, init_only.packed_128),
        packed_256: sub(full.packed_256, init_only.packed_256),
        packed_512: sub(full.packed_512, init_only.packed_512),
        imc_cas_reads: sub(full.imc_cas_reads, init_only.imc_cas_reads),
        imc_cas_writes: sub(full.imc_cas_writes, init_only.imc_cas_writes),
        valid_mask: full.valid_mask,
    };
    Ok((out, clamped))
}

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

/// Counter source: real PMUs or a deterministic script.
pub enum CounterBackend {
    Hardware(HardwareCounters),
    Mock(MockCounters),
}

impl CounterBackend {
    pub fn mask(&self) -> CounterMask {
        match self {
            CounterBackend::Hardware(h) => h.mask,
            CounterBackend::Mock(m) => m.mask,
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, CounterBackend::Mock(_))
    }

    /// Availability notes accumulated while opening counters (masked groups,
    /// permission remediation hints).
    pub fn notes(&self) -> &[String] {
        match self {
            CounterBackend::Hardware(h) => &h.notes,
            CounterBackend::Mock(_) => &[],
        }
    }

    /// Samples counters and wall time around `region`.
    ///
    /// Hardware reads every counter immediately before and after the region
    /// and returns the deltas; the region runs exactly once. Mock pops the
    /// next scripted sample (and, for Execute regions, the next scripted
    /// runtime) without running the region at all. Exclusive access (`&mut`)
    /// keeps scopes from nesting on one backend.
    pub fn scoped_sample(
        &mut self,
        kind: RegionKind,
        region: &mut dyn FnMut() -> Result<()>,
    ) -> Result<ScopedSample> {
        match self {
            CounterBackend::Hardware(h) => h.scoped_sample(region),
            CounterBackend::Mock(m) => m.next_sample(kind),
        }
    }
}

/// Scripted counter replay. Samples are consumed strictly in order; running
/// out is an error (a script/plan mismatch), never a silent zero.
pub struct MockCounters {
    mask: CounterMask,
    samples: VecDeque<CounterSample>,
    runtimes: VecDeque<f64>,
    consumed_samples: usize,
    consumed_runtimes: usize,
}

impl MockCounters {
    pub fn new(
        mask: CounterMask,
        samples: Vec<CounterSample>,
        runtimes_seconds: Vec<f64>,
    ) -> MockCounters {
        MockCounters {
            mask,
            samples: samples.into(),
            runtimes: runtimes_seconds.into(),
            consumed_samples: 0,
            consumed_runtimes: 0,
        }
    }

    fn next_sample(&mut self, kind: RegionKind) -> Result<ScopedSample> {
        let mut sample = self.samples.pop_front().ok_or_else(|| {
            Error::MockScript(format!(
                "counter script exhausted after {} samples",
                self.consumed_samples
            ))
        })?;
        self.consumed_samples += 1;
        sample.valid_mask = self.mask;
        let elapsed_seconds = match kind {
            RegionKind::Overhead => 0.0,
            RegionKind::Execute => {
                let t = self.runtimes.pop_front().ok_or_else(|| {
                    Error::MockScript(format!(
                        "runtime script exhausted after {} runtimes",
                        self.consumed_runtimes
                    ))
                })?;
                self.consumed_runtimes += 1;
                t
            }
        };
        Ok(ScopedSample {
            sample,
            elapsed_seconds,
        })
    }

    pub fn remaining(&self) -> (usize, usize) {
        (self.samples.len(), self.runtimes.len())
    }
}

// ---------------------------------------------------------------------------
// Hardware backend (perf_event_open)
// ---------------------------------------------------------------------------

// The perf syscall ABI, declared locally: the struct layout is a stable
// kernel interface. Only the VER0 prefix (64 bytes) is needed — config
// carries event|umask<<8 and nothing uses config1/config2.
#[repr(C)]
#[derive(Clone, Copy)]
struct PerfEventAttr {
    type_: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
}

const PERF_ATTR_SIZE_VER0: u32 = 64;
const PERF_TYPE_RAW: u32 = 4;
const PERF_FORMAT_TOTAL_TIME_ENABLED: u64 = 1;
const PERF_FORMAT_TOTAL_TIME_RUNNING: u64 = 2;
const PERF_FLAG_FD_CLOEXEC: libc::c_ulong = 8;
// attr.flags bits
const ATTR_INHERIT: u64 = 1 << 1;
const ATTR_EXCLUDE_KERNEL: u64 = 1 << 5;
const ATTR_EXCLUDE_HV: u64 = 1 << 6;

/// Exact remediation for the usual permission failure.
pub const PARANOID_REMEDIATION: &str = "sysctl -w kernel.perf_event_paranoid=0";

/// FP_ARITH_INST_RETIRED umasks, in CounterSample field order.
const FP_EVENT: u64 = 0xC7;
const FP_UMASKS: [u64; 4] = [0x02, 0x08, 0x20, 0x80];
const FP_EVENT_NAMES: [&str; 4] = [
    "fp_arith_inst_retired.scalar_single",
    "fp_arith_inst_retired.128b_packed_single",
    "fp_arith_inst_retired.256b_packed_single",
    "fp_arith_inst_retired.512b_packed_single",
];

/// family/model pairs whose FP_ARITH encodings match the shipped table
/// (Skylake-SP/Cascade Lake and the server parts that kept the encoding).
const FP_KNOWN_MODELS: [(u32, u32); 5] = [(6, 85), (6, 106), (6, 108), (6, 143), (6, 207)];

struct PerfCounter {
    fd: libc::c_int,
}

impl PerfCounter {
    fn open(attr: &PerfEventAttr, pid: libc::pid_t, cpu: libc::c_int) -> std::io::Result<PerfCounter> {
        let fd = unsafe {
            libc::syscall(
                libc::SYS_perf_event_open,
                attr as *const PerfEventAttr,
                pid,
                cpu,
                -1 as libc::c_int, // no group; events are read independently
                PERF_FLAG_FD_CLOEXEC,
            )
        };
        if fd < 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(PerfCounter { fd: fd as libc::c_int })
    }

    /// Reads the count, scaled for multiplexing when the event was not
    /// scheduled the whole time.
    fn read_scaled(&self) -> Result<u64> {
        let mut buf = [0u64; 3]; // value, time_enabled, time_running
        let n = unsafe {
            libc::read(
                self.fd,
                buf.as_mut_ptr().cast(),
                std::mem::size_of_val(&buf),
            )
        };
        if n < 0 {
            return Err(Error::Counters(format!(
                "counter read failed: {}",
                std::io::Error::last_os_error()
            )));
        }
        let [value, enabled, running] = buf;
        if running == 0 {
            return Ok(0);
        }
        if running >= enabled {
            return Ok(value);
        }
        Ok((value as f64 * enabled as f64 / running as f64).round() as u64)
    }
}

impl Drop for PerfCounter {
    fn drop(&mut self) {
        unsafe {
            libc::close(self.fd);
        }
    }
}

/// Open FP and IMC counters, with per-group availability masks.
///
/// The FP events attach to the calling process and are inherited by threads
/// spawned afterwards, so a multi-threaded region is fully counted. The IMC
/// events attach system-wide per memory-controller box. Groups that cannot
/// be opened are masked with a note (including the permission remediation);
/// opening fails outright only when no counter of any kind is available.
pub struct HardwareCounters {
    fp: Vec<PerfCounter>, // parallel to FP_UMASKS when fp_complete
    imc_reads: Vec<PerfCounter>,
    imc_writes: Vec<PerfCounter>,
    pub mask: CounterMask,
    pub notes: Vec<String>,
}

impl HardwareCounters {
    pub fn open() -> Result<HardwareCounters> {
        let mut notes = Vec::new();
        let mut mask = CounterMask::NONE;

        let mut fp = Vec::new();
        match resolve_fp_configs(Path::new("/sys/bus/event_source/devices"), cpu_family_model()) {
            Some(configs) => {
                let mut attr = zeroed_attr();
                attr.type_ = PERF_TYPE_RAW;
                attr.read_format =
                    PERF_FORMAT_TOTAL_TIME_ENABLED | PERF_FORMAT_TOTAL_TIME_RUNNING;
                attr.flags = ATTR_INHERIT | ATTR_EXCLUDE_KERNEL | ATTR_EXCLUDE_HV;
                let mut failed = None;
                for (i, &config) in configs.iter().enumerate() {
                    attr.config = config;
                    // pid 0, cpu -1: this process, any CPU.
                    match PerfCounter::open(&attr, 0, -1) {
                        Ok(c) => fp.push(c),
                        Err(e) => {
                            failed = Some((FP_EVENT_NAMES[i], e));
                            break;
                        }
                    }
                }
                match failed {
                    None => {
                        mask.scalar_single = true;
                        mask.packed_128 = true;
                        mask.packed_256 = true;
                        mask.packed_512 = true;
                    }
                    Some((name, e)) => {
                        fp.clear();
                        notes.push(fp_open_failure_note(name, &e));
                    }
                }
            }
            None => notes.push(
                "FP counters masked: no event encoding for this CPU model and no symbolic \
                 event database entry"
                    .into(),
            ),
        }

        let mut imc_reads = Vec::new();
        let mut imc_writes = Vec::new();
        let boxes = discover_imc_boxes(Path::new("/sys/bus/event_source/devices"));
        if boxes.is_empty() {
            notes.push("IMC counters masked: no uncore memory-controller PMU exposed".into());
        } else {
            let mut failure = None;
            'boxes: for b in &boxes {
                for &cpu in &b.cpus {
                    let mut attr = zeroed_attr();
                    attr.type_ = b.type_id;
                    attr.read_format =
                        PERF_FORMAT_TOTAL_TIME_ENABLED | PERF_FORMAT_TOTAL_TIME_RUNNING;
                    attr.config = b.read_config;
                    // pid -1, cpu N: system-wide on the box's home CPU.
                    match PerfCounter::open(&attr, -1, cpu as libc::c_int) {
                        Ok(c) => imc_reads.push(c),
                        Err(e) => {
                            failure = Some((b.name.clone(), e));
                            break 'boxes;
                        }
                    }
                    attr.config = b.write_config;
                    match PerfCounter::open(&attr, -1, cpu as libc::c_int) {
                        Ok(c) => imc_writes.push(c),
                        Err(e) => {
                            failure = Some((b.name.clone(), e));
                            break 'boxes;
                        }
                    }
                }
            }
            match failure {
                None => mask.imc = true,
                Some((name, e)) => {
                    imc_reads.clear();
                    imc_writes.clear();
                    let mut note =
                        format!("IMC counters masked: opening {name} failed: {e}");
                    if e.raw_os_error() == Some(libc::EACCES)
                        || e.raw_os_error() == Some(libc::EPERM)
                    {
                        note.push_str(&format!(
                            " (system-wide counters need `{PARANOID_REMEDIATION}` or \
                             CAP_PERFMON)"
                        ));
                    }
                    notes.push(note);
                }
            }
        }

        if mask == CounterMask::NONE {
            return Err(Error::Counters(format!(
                "no hardware counters available: {}",
                notes.join("; ")
            )));
        }
        Ok(HardwareCounters {
            fp,
            imc_reads,
            imc_writes,
            mask,
            notes,
        })
    }

    fn read_all(&self) -> Result<CounterSample> {
        let mut s = CounterSample::zero(self.mask);
        if self.mask.fp_complete() {
            let fields = [
                &mut s.scalar_single as *mut u64,
                &mut s.packed_128 as *mut u64,
                &mut s.packed_256 as *mut u64,
                &mut s.packed_512 as *mut u64,
            ];
            for (counter, field) in self.fp.iter().zip(fields) {
                unsafe { *field = counter.read_scaled()? };
            }
        }
        if self.mask.imc {
            for c in &self.imc_reads {
                s.imc_cas_reads += c.read_scaled()?;
            }
            for c in &self.imc_writes {
                s.imc_cas_writes += c.read_scaled()?;
            }
        }
        Ok(s)
    }

    /// Delta-read scoping: counters stay enabled and are read immediately
    /// before and after the region. Inherited FP counters aggregate child
    /// threads on read, which a reset-based scope would lose.
    fn scoped_sample(&mut self, region: &mut dyn FnMut() -> Result<()>) -> Result<ScopedSample> {
        let before = self.read_all()?;
        let start = Instant::now();
        region()?;
        let elapsed_seconds = start.elapsed().as_secs_f64();
        let after = self.read_all()?;
        let (sample, _) = subtract_overhead(&after, &before)?;
        Ok(ScopedSample {
            sample,
            elapsed_seconds,
        })
    }
}

fn zeroed_attr() -> PerfEventAttr {
    let mut attr: PerfEventAttr = unsafe { std::mem::zeroed() };
    attr.size = PERF_ATTR_SIZE_VER0;
    attr
}

fn fp_open_failure_note(event: &str, e: &std::io::Error) -> String {
    let mut note = format!("FP counters masked: opening {event} failed: {e}");
    if e.raw_os_error() == Some(libc::EACCES) || e.raw_os_error() == Some(libc::EPERM) {
        note.push_str(&format!(" (try `{PARANOID_REMEDIATION}`)"));
    }
    note
}

/// family/model from /proc/cpuinfo.
fn cpu_family_model() -> Option<(u32, u32)> {
    let text = fs::read_to_string("/proc/cpuinfo").ok()?;
    let mut family = None;
    let mut model = None;
    for line in text.lines() {
        let (key, value) = line.split_once(':')?;
        match key.trim() {
            "cpu family" => family = value.trim().parse().ok(),
            "model" => model = value.trim().parse().ok(),
            _ => {}
        }
        if family.is_some() && model.is_some() {
            break;
        }
    }
    Some((family?, model?))
}

/// raw `config` values for the four FP lane events, or None when neither the
/// shipped model table nor the OS event database covers this CPU.
fn resolve_fp_configs(
    event_source_root: &Path,
    family_model: Option<(u32, u32)>,
) -> Option<[u64; 4]> {
    if let Some(fm) = family_model {
        if FP_KNOWN_MODELS.contains(&fm) {
            return Some(FP_UMASKS.map(|u| FP_EVENT | (u << 8)));
        }
    }
    // Symbolic fallback: the kernel exports per-event encodings as files.
    let events_dir = event_source_root.join("cpu/events");
    let mut configs = [0u64; 4];
    for (i, name) in FP_EVENT_NAMES.iter().enumerate() {
        let spec = fs::read_to_string(events_dir.join(name)).ok()?;
        configs[i] = parse_event_spec(spec.trim())?;
    }
    Some(configs)
}

/// Parses "event=0xc7,umask=0x80" (fields beyond event/umask are ignored)
/// into a raw config value.
fn parse_event_spec(spec: &str) -> Option<u64> {
    let mut event = None;
    let mut umask = 0u64;
    for field in spec.split(',') {
        let (key, value) = field.split_once('=')?;
        let value = value.trim();
        let parsed = match value.strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16).ok()?,
            None => value.parse().ok()?,
        };
        match key.trim() {
            "event" => event = Some(parsed),
            "umask" => umask = parsed,
            _ => {}
        }
    }
    Some(event? | (umask << 8))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ImcBox {
    name: String,
    type_id: u32,
    cpus: Vec<usize>,
    read_config: u64,
    write_config: u64,
}

/// Default CAS_COUNT encodings when a box has no symbolic event files.
const IMC_CAS_EVENT: u64 = 0x04;
const IMC_CAS_RD_UMASK: u64 = 0x03;
const IMC_CAS_WR_UMASK: u64 = 0x0C;

/// Finds every memory-controller PMU box: server parts expose
/// uncore_imc_<n>, client parts a single uncore_imc. Each box's dynamic
/// type id and home CPUs come from its sysfs directory.
fn discover_imc_boxes(event_source_root: &Path) -> Vec<ImcBox> {
    let Ok(entries) = fs::read_dir(event_source_root) else {
        return Vec::new();
    };
    let mut boxes = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != "uncore_imc" && !name.starts_with("uncore_imc_") {
            continue;
        }
        let dir = entry.path();
        let Some(type_id) = fs::read_to_string(dir.join("type"))
            .ok()
            .and_then(|s| s.trim().parse().ok())
        else {
            continue;
        };
        let cpus = fs::read_to_string(dir.join("cpumask"))
            .ok()
            .and_then(|s| crate::topology::parse_cpu_list(s.trim()).ok())
            .unwrap_or_else(|| vec![0]);

        let symbolic = |event: &str| -> Option<u64> {
            let spec = fs::read_to_string(dir.join("events").join(event)).ok()?;
            parse_event_spec(spec.trim())
        };
        // Server boxes count CAS commands; client boxes expose 64 B
        // data_reads/data_writes. Both count cache lines.
        let (read_config, write_config) = match (
            symbolic("cas_count_read").or_else(|| symbolic("data_reads")),
            symbolic("cas_count_write").or_else(|| symbolic("data_writes")),
        ) {
            (Some(r), Some(w)) => (r, w),
            _ => (
                IMC_CAS_EVENT | (IMC_CAS_RD_UMASK << 8),
                IMC_CAS_EVENT | (IMC_CAS_WR_UMASK << 8),
            ),
        };
        boxes.push(ImcBox {
            name,
            type_id,
            cpus,
            read_config,
            write_config,
        });
    }
    boxes.sort_by(|a, b| a.name.cmp(&b.name));
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(fields: [u64; 6]) -> CounterSample {
        CounterSample {
            scalar_single: fields[0],
            packed_128: fields[1],
            packed_256: fields[2],
            packed_512: fields[3],
            imc_cas_reads: fields[4],
            imc_cas_writes: fields[5],
            valid_mask: CounterMask::ALL,
        }
    }

    #[test]
    fn flop_conversion_oracles() {
        assert_eq!(flops_from_sample(&sample([0; 6])).unwrap(), 0);
        // One 512-bit FMA retirement counts twice -> 32 FLOP.
        assert_eq!(flops_from_sample(&sample([0, 0, 0, 2, 0, 0])).unwrap(), 32);
        assert_eq!(
            flops_from_sample(&sample([3, 1, 2, 1, 0, 0])).unwrap(),
            3 + 4 + 16 + 16
        );
    }

    #[test]
    fn flops_need_complete_fp_mask() {
        let mut s = sample([1, 1, 1, 1, 0, 0]);
        s.valid_mask.packed_512 = false;
        let err = flops_from_sample(&s).unwrap_err();
        assert!(err.to_string().contains("work not measurable"), "{err}");
    }

    #[test]
    fn traffic_conversion_oracles() {
        assert_eq!(traffic_from_sample(&sample([0; 6])).unwrap(), 0);
        assert_eq!(
            traffic_from_sample(&sample([0, 0, 0, 0, 16384, 0])).unwrap(),
            1 << 20
        );
        let mut s = sample([0, 0, 0, 0, 10, 10]);
        s.valid_mask.imc = false;
        assert!(traffic_from_sample(&s).is_err());
    }

    #[test]
    fn overhead_subtraction_and_clamp() {
        let (d, clamped) =
            subtract_overhead(&sample([5, 5, 5, 105, 0, 0]), &sample([5, 5, 5, 45, 0, 0]))
                .unwrap();
        assert_eq!(d.packed_512, 60);
        assert_eq!(d.scalar_single, 0);
        assert!(!clamped);

        let (d, clamped) =
            subtract_overhead(&sample([0, 0, 0, 0, 10, 0]), &sample([0, 0, 0, 0, 12, 0]))
                .unwrap();
        assert_eq!(d.imc_cas_reads, 0);
        assert!(clamped);

        let full = sample([1; 6]);
        let mut init = sample([1; 6]);
        init.valid_mask.imc = false;
        assert!(subtract_overhead(&full, &init).is_err());
    }

    #[test]
    fn subtraction_identities() {
        let x = sample([7, 8, 9, 10, 11, 12]);
        let zero = CounterSample::zero(CounterMask::ALL);
        assert_eq!(subtract_overhead(&x, &zero).unwrap(), (x, false));
        assert_eq!(subtract_overhead(&x, &x).unwrap(), (zero, false));
    }

    #[test]
    fn mock_replays_in_order_and_errors_on_exhaustion() {
        let scripted = sample([0, 0, 0, 2, 0, 0]);
        let mut backend = CounterBackend::Mock(MockCounters::new(
            CounterMask::ALL,
            vec![scripted, sample([1; 6])],
            vec![0.25],
        ));
        let mut region = || Ok(());

        let first = backend
            .scoped_sample(RegionKind::Execute, &mut region)
            .unwrap();
        assert_eq!(first.sample, scripted);
        assert_eq!(first.elapsed_seconds, 0.25);

        let second = backend
            .scoped_sample(RegionKind::Overhead, &mut region)
            .unwrap();
        assert_eq!(second.sample, sample([1; 6]));
        assert_eq!(second.elapsed_seconds, 0.0);

        let err = backend
            .scoped_sample(RegionKind::Overhead, &mut region)
            .unwrap_err();
        assert!(err.to_string().contains("exhausted after 2"), "{err}");
    }

    #[test]
    fn mock_does_not_run_the_region() {
        let mut backend = CounterBackend::Mock(MockCounters::new(
            CounterMask::ALL,
            vec![sample([0; 6])],
            vec![],
        ));
        let mut ran = false;
        let mut region = || {
            ran = true;
            Ok(())
        };
        backend
            .scoped_sample(RegionKind::Overhead, &mut region)
            .unwrap();
        assert!(!ran);
    }

    #[test]
    fn mock_applies_backend_mask_to_scripted_samples() {
        let mask = CounterMask {
            imc: false,
            ..CounterMask::ALL
        };
        let mut backend =
            CounterBackend::Mock(MockCounters::new(mask, vec![sample([0; 6])], vec![]));
        let got = backend
            .scoped_sample(RegionKind::Overhead, &mut || Ok(()))
            .unwrap();
        assert_eq!(got.sample.valid_mask, mask);
    }

    #[test]
    fn event_spec_parsing() {
        assert_eq!(parse_event_spec("event=0xc7,umask=0x80"), Some(0x80c7));
        assert_eq!(parse_event_spec("event=0x04,umask=0x03"), Some(0x0304));
        assert_eq!(parse_event_spec("event=0x01"), Some(0x01));
        assert_eq!(parse_event_spec("event=0xc7,umask=0x02,period=2000003"), Some(0x02c7));
        assert_eq!(parse_event_spec("umask=0x80"), None);
        assert_eq!(parse_event_spec("garbage"), None);
    }

    #[test]
    fn fp_config_resolution_prefers_model_table() {
        let configs =
            resolve_fp_configs(Path::new("/nonexistent"), Some((6, 85))).unwrap();
        assert_eq!(configs, [0x02c7, 0x08c7, 0x20c7, 0x80c7]);
        // Unknown model with no event database -> unresolved.
        assert_eq!(resolve_fp_configs(Path::new("/nonexistent"), Some((6, 1))), None);
    }

    #[test]
    fn fp_config_resolution_falls_back_to_event_database() {
        let root = crate::topology::fixture_path("perf-2box/bus/event_source/devices");
        let configs = resolve_fp_configs(&root, Some((6, 1))).unwrap();
        assert_eq!(configs, [0x02c7, 0x08c7, 0x20c7, 0x80c7]);
    }

    #[test]
    fn imc_discovery_parses_fixture_tree() {
        let root = crate::topology::fixture_path("perf-2box/bus/event_source/devices");
        let boxes = discover_imc_boxes(&root);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].name, "uncore_imc_0");
        assert_eq!(boxes[0].type_id, 12);
        assert_eq!(boxes[0].cpus, vec![0, 20]);
        assert_eq!(boxes[0].read_config, 0x0304);
        assert_eq!(boxes[0].write_config, 0x0c04);
        // Second box has no symbolic events dir -> shipped defaults.
        assert_eq!(boxes[1].type_id, 13);
        assert_eq!(boxes[1].read_config, 0x0304);
        assert_eq!(boxes[1].write_config, 0x0c04);
    }

    #[test]
    fn sample_combination_intersects_masks() {
        let a = sample([1, 2, 3, 4, 5, 6]);
        let mut b = sample([10, 20, 30, 40, 50, 60]);
        b.valid_mask.packed_512 = false;
        let c = a.combined(&b);
        assert_eq!(c.scalar_single, 11);
        assert_eq!(c.packed_512, 44);
        assert!(!c.valid_mask.packed_512);
        assert!(c.valid_mask.imc);
    }
}
