//! Measurement orchestration: cache protocol, repetition, overhead-subtracted
//! counting, and assembly of per-scenario measurement records.

use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codegen::VectorIsa;
use crate::error::{Error, Result};
use crate::kernels::{build_kernel, default_element_count, FmaDense, SyntheticKernel};
use crate::pmu::{
    flops_from_sample, subtract_overhead, traffic_from_sample, CounterBackend, CounterSample,
    RegionKind,
};
use crate::roofline::{KernelMeasurement, FLAG_TRAFFIC_UNRELIABLE, FLAG_WORK_NOT_MEASURABLE};
use crate::topology::{pin_current_thread, Scenario};

/// Cache state the timed region starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheKind {
    Cold,
    Warm,
}

impl CacheKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CacheKind::Cold => "cold",
            CacheKind::Warm => "warm",
        }
    }
}

impl std::fmt::Display for CacheKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CacheKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold" => Ok(CacheKind::Cold),
            "warm" => Ok(CacheKind::Warm),
            other => Err(Error::InvalidInput(format!(
                "unknown cache protocol '{other}' (expected cold or warm)"
            ))),
        }
    }
}

/// How caches are prepared before every timed repetition: Cold evicts prior
/// working sets by writing a clobber buffer end-to-end, Warm pre-executes
/// the kernel so its working set is resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheProtocol {
    pub kind: CacheKind,
    pub cold_clobber_bytes: u64,
    pub warm_iterations: u32,
}

pub const DEFAULT_WARM_ITERATIONS: u32 = 5;

impl CacheProtocol {
    /// Cold protocol with the default clobber size of twice the LLC.
    pub fn cold(llc_bytes: u64) -> CacheProtocol {
        CacheProtocol {
            kind: CacheKind::Cold,
            cold_clobber_bytes: 2 * llc_bytes,
            warm_iterations: DEFAULT_WARM_ITERATIONS,
        }
    }

    pub fn warm() -> CacheProtocol {
        CacheProtocol {
            kind: CacheKind::Warm,
            cold_clobber_bytes: 0,
            warm_iterations: DEFAULT_WARM_ITERATIONS,
        }
    }

    pub fn for_kind(kind: CacheKind, llc_bytes: u64) -> CacheProtocol {
        match kind {
            CacheKind::Cold => CacheProtocol::cold(llc_bytes),
            CacheKind::Warm => CacheProtocol::warm(),
        }
    }

    pub fn validate(&self, llc_bytes: u64) -> Result<()> {
        match self.kind {
            CacheKind::Cold if self.cold_clobber_bytes < llc_bytes => {
                Err(Error::InvalidInput(format!(
                    "cold clobber of {} bytes cannot evict a {} byte LLC",
                    self.cold_clobber_bytes, llc_bytes
                )))
            }
            CacheKind::Warm if self.warm_iterations < 1 => Err(Error::InvalidInput(
                "warm protocol needs at least 1 warm-up iteration".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One cell of the measurement matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub scenario: Scenario,
    pub cache: CacheProtocol,
    pub repetitions: u32,
    pub kernel_name: String,
    pub baseline_subtraction: bool,
}

pub const DEFAULT_REPETITIONS: u32 = 10;
/// Below this per-repetition count, a reported mean is not meaningful.
pub const MIN_REPS_FOR_AVERAGES: u32 = 3;

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < MIN_REPS_FOR_AVERAGES {
            return Err(Error::InvalidInput(format!(
                "{} repetitions cannot support an averaged result (minimum {})",
                self.repetitions, MIN_REPS_FOR_AVERAGES
            )));
        }
        if self.kernel_name.is_empty() {
            return Err(Error::InvalidInput("empty kernel name in plan".into()));
        }
        Ok(())
    }
}

/// Evicts prior working sets by writing `cold_clobber_bytes` of scratch with
/// ordinary (cache-allocating) stores. Never call this inside a timed region
/// or counter scope.
pub fn clear_caches(protocol: &CacheProtocol) -> Result<()> {
    if protocol.kind != CacheKind::Cold {
        return Err(Error::InvalidInput(
            "clear_caches called under the warm protocol".into(),
        ));
    }
    let mut scratch = vec![0u8; protocol.cold_clobber_bytes as usize];
    scratch.fill(0xA5);
    std::hint::black_box(&scratch);
    Ok(())
}

/// IMC counters are system-wide, so two concurrent measurements would read
/// each other's traffic. Everything that samples counters serializes here.
static MEASUREMENT_LOCK: Mutex<()> = Mutex::new(());

fn measurement_guard() -> MutexGuard<'static, ()> {
    MEASUREMENT_LOCK
        .lock()
        .unwrap_or_else(std::sync::PoisonError::into_inner)
}

/// Buffers below this bound produce controller traffic dominated by noise;
/// the measurement is kept but flagged.
pub const TRAFFIC_RELIABLE_BYTES: u64 = 1 << 20;

fn mean_sample(samples: &[CounterSample]) -> CounterSample {
    let n = samples.len() as u128;
    let avg = |f: fn(&CounterSample) -> u64| -> u64 {
        let sum: u128 = samples.iter().map(|s| f(s) as u128).sum();
        ((sum + n / 2) / n) as u64
    };
    CounterSample {
        scalar_single: avg(|s| s.scalar_single),
        packed_128: avg(|s| s.packed_128),
        packed_256: avg(|s| s.packed_256),
        packed_512: avg(|s| s.packed_512),
        imc_cas_reads: avg(|s| s.imc_cas_reads),
        imc_cas_writes: avg(|s| s.imc_cas_writes),
        valid_mask: samples
            .iter()
            .skip(1)
            .fold(samples[0].valid_mask, |m, s| m.intersect(&s.valid_mask)),
    }
}

/// The two-run protocol around a registered kernel.
///
/// One init-only pass samples the measurement scaffolding with an empty
/// region; then every repetition prepares caches per the protocol and
/// samples counters and wall time around exactly one execute. Work and
/// traffic come from the mean full sample minus the init-only sample,
/// runtime is the mean of the per-repetition times (all retained).
///
/// The scripted backend replays samples and runtimes without running the
/// kernel, so init and cache preparation are skipped there.
pub fn measure_kernel(
    kernel: &mut dyn SyntheticKernel,
    plan: &RunPlan,
    backend: &mut CounterBackend,
    seed: u64,
) -> Result<KernelMeasurement> {
    plan.validate()?;
    if kernel.name() != plan.kernel_name {
        return Err(Error::InvalidInput(format!(
            "plan names kernel '{}' but '{}' was supplied",
            plan.kernel_name,
            kernel.name()
        )));
    }
    let _guard = measurement_guard();
    let live = !backend.is_mock();

    if live {
        let &cpu = plan
            .scenario
            .cpu_set
            .first()
            .ok_or_else(|| Error::Topology("scenario has no CPUs".into()))?;
        pin_current_thread(cpu)?;
        kernel.init(seed)?;
    }

    // Empty region: counts only the sampling scaffolding itself.
    let overhead = backend.scoped_sample(RegionKind::Overhead, &mut || Ok(()))?;
    let raw_init_only = overhead.sample;

    let mut warnings = Vec::new();
    let mut full_samples = Vec::with_capacity(plan.repetitions as usize);
    let mut per_rep_runtimes = Vec::with_capacity(plan.repetitions as usize);
    for _ in 0..plan.repetitions {
        if live {
            match plan.cache.kind {
                CacheKind::Cold => clear_caches(&plan.cache)?,
                CacheKind::Warm => {
                    for _ in 0..plan.cache.warm_iterations {
                        kernel.execute()?;
                    }
                }
            }
        }
        let scoped = backend.scoped_sample(RegionKind::Execute, &mut || kernel.execute())?;
        full_samples.push(scoped.sample);
        per_rep_runtimes.push(scoped.elapsed_seconds);
    }

    let raw_full = mean_sample(&full_samples);
    let (net, clamped) = subtract_overhead(&raw_full, &raw_init_only)?;
    if clamped {
        warnings.push(
            "init-only sample exceeded a measured counter; the difference was clamped at zero"
                .into(),
        );
    }
    let work_flops = flops_from_sample(&net)?;
    let mut traffic_bytes = traffic_from_sample(&net)?;
    let runtime_seconds =
        per_rep_runtimes.iter().sum::<f64>() / per_rep_runtimes.len() as f64;

    if plan.baseline_subtraction {
        if live {
            // Whatever the rest of the machine pushes through the
            // controllers in one execute's worth of idle time is noise on Q.
            let idle = backend.scoped_sample(RegionKind::Overhead, &mut || {
                std::thread::sleep(Duration::from_secs_f64(runtime_seconds));
                Ok(())
            })?;
            let idle_traffic = traffic_from_sample(&idle.sample)?;
            traffic_bytes = traffic_bytes.saturating_sub(idle_traffic);
            warnings.push(format!(
                "idle baseline of {idle_traffic} bytes subtracted from traffic"
            ));
        } else {
            warnings.push("idle-baseline subtraction skipped under the scripted backend".into());
        }
    }

    if !kernel.work_pmu_visible() {
        warnings.push(FLAG_WORK_NOT_MEASURABLE.into());
    }
    if kernel.footprint_bytes() < TRAFFIC_RELIABLE_BYTES {
        warnings.push(FLAG_TRAFFIC_UNRELIABLE.into());
    }

    let element_count = kernel.element_count() as u64;
    let calibrated_flop_per_element = match kernel.analytic_work() {
        None if work_flops > 0 && element_count > 0 => {
            Some(work_flops as f64 / element_count as f64)
        }
        _ => None,
    };

    let m = KernelMeasurement {
        kernel_name: kernel.name().to_string(),
        work_flops,
        traffic_bytes,
        runtime_seconds,
        repetitions: plan.repetitions,
        cache_protocol: plan.cache.kind,
        scenario: plan.scenario.clone(),
        raw_full,
        raw_init_only,
        per_rep_runtimes,
        warnings,
        element_count,
        calibrated_flop_per_element,
    };
    m.validate()?;
    Ok(m)
}

/// What to build for each suite cell: kernels hold scenario CPUs, so they
/// are constructed per plan rather than shared across plans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    /// Element count; None takes the kernel's default size.
    #[serde(default)]
    pub n: Option<usize>,
    /// Pins the vector tier instead of detecting it (scripted runs on hosts
    /// whose ISA differs from the scripted machine).
    #[serde(default)]
    pub isa: Option<VectorIsa>,
}

impl KernelSpec {
    pub fn named(name: &str) -> KernelSpec {
        KernelSpec { name: name.to_string(), n: None, isa: None }
    }

    pub fn build(&self, cpus: Vec<usize>) -> Result<Box<dyn SyntheticKernel>> {
        let n = match self.n {
            Some(n) => n,
            None => default_element_count(&self.name).ok_or_else(|| {
                Error::InvalidInput(format!("unknown kernel {:?}", self.name))
            })?,
        };
        if self.name == "fma_dense" {
            return Ok(Box::new(FmaDense::with_isa(n, cpus, self.isa)?));
        }
        build_kernel(&self.name, n, cpus)
    }
}

/// One suite cell that could not produce a measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFailure {
    pub kernel_name: String,
    pub scenario: String,
    pub cache: CacheKind,
    pub error: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub measurements: Vec<KernelMeasurement>,
    pub failures: Vec<CellFailure>,
}

/// Runs every kernel under every plan, in declared order (plans outer).
/// A failing cell becomes a failure record; the suite always finishes.
pub fn run_suite(
    specs: &[KernelSpec],
    plans: &[RunPlan],
    backend: &mut CounterBackend,
    seed: u64,
) -> Result<SuiteOutcome> {
    if specs.is_empty() || plans.is_empty() {
        return Err(Error::InvalidInput(
            "suite needs at least one kernel and one plan".into(),
        ));
    }
    let mut outcome = SuiteOutcome::default();
    for plan in plans {
        for spec in specs {
            let plan = RunPlan { kernel_name: spec.name.clone(), ..plan.clone() };
            let cell = spec
                .build(plan.scenario.cpu_set.clone())
                .and_then(|mut k| measure_kernel(k.as_mut(), &plan, backend, seed));
            match cell {
                Ok(m) => outcome.measurements.push(m),
                Err(e) => outcome.failures.push(CellFailure {
                    kernel_name: spec.name.clone(),
                    scenario: plan.scenario.kind.as_str().to_string(),
                    cache: plan.cache.kind,
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}
