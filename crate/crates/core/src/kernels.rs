//! Built-in synthetic kernels with analytically known work and traffic.
//! They validate the measurement chain: a counter pipeline that cannot
//! reproduce `n - 1` adds over `n` floats cannot be trusted on real code.
//!
//! Every kernel separates an untimed `init` phase (allocate and fill
//! inputs, seeded) from the measured `execute` phase, and `execute` is
//! idempotent so repetitions are valid. Results land in an opaque sink so
//! the optimizer cannot delete the computation.

use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codegen::{detect_isa, emit_fma_stream, CodeStream, ComputeBenchConfig, VectorIsa};
use crate::error::{Error, Result};
use crate::topology::pin_current_thread;

/// Cold-traffic closed forms are ranges: the low end is the mandatory
/// transfer, the high end adds write-allocate effects the memory system may
/// or may not incur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficRange {
    pub min_bytes: u64,
    pub max_bytes: u64,
}

impl TrafficRange {
    pub fn exact(bytes: u64) -> TrafficRange {
        TrafficRange { min_bytes: bytes, max_bytes: bytes }
    }

    pub fn contains(&self, bytes: u64) -> bool {
        self.min_bytes <= bytes && bytes <= self.max_bytes
    }
}

pub trait SyntheticKernel: Send {
    fn name(&self) -> &str;

    /// The size parameter the analytic formulas are written in.
    fn element_count(&self) -> usize;

    /// Allocates and fills inputs; never part of a timed or counted region.
    fn init(&mut self, seed: u64) -> Result<()>;

    /// The measured region. Requires `init`; idempotent.
    fn execute(&mut self) -> Result<()>;

    /// Exact FLOP closed form, or None when the count is symbolic and must
    /// be calibrated from a measurement.
    fn analytic_work(&self) -> Option<u64>;

    fn analytic_cold_traffic(&self) -> TrafficRange;

    /// Bytes the execute phase touches (for cache-fit reasoning and the
    /// small-buffer traffic gate).
    fn footprint_bytes(&self) -> u64;

    fn parallelizable(&self) -> bool;

    /// False for kernels whose real operations never increment the FP
    /// counters (min/max/copy style); their measured work is reported but
    /// flagged.
    fn work_pmu_visible(&self) -> bool {
        true
    }
}

fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fill_uniform(data: &mut Vec<f32>, n: usize, seed: u64, lo: f32, hi: f32) {
    let mut rng = seeded_rng(seed);
    let dist = Uniform::new(lo, hi);
    data.clear();
    data.reserve_exact(n);
    data.extend((0..n).map(|_| dist.sample(&mut rng)));
}

fn shard_ranges(n: usize, shards: usize) -> Vec<Range<usize>> {
    let per = n / shards;
    let rem = n % shards;
    let mut out = Vec::with_capacity(shards);
    let mut lo = 0;
    for i in 0..shards {
        let hi = lo + per + usize::from(i < rem);
        out.push(lo..hi);
        lo = hi;
    }
    out
}

/// Runs `f` over one shard per CPU. A single CPU runs inline on the calling
/// thread (the harness already pinned it); more spawn pinned workers.
fn run_sharded<T, F>(cpus: &[usize], n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    if cpus.is_empty() {
        return Err(Error::InvalidInput("kernel has no CPUs to run on".into()));
    }
    if cpus.len() == 1 {
        return Ok(vec![f(0..n)]);
    }
    let ranges = shard_ranges(n, cpus.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = cpus
            .iter()
            .zip(&ranges)
            .map(|(&cpu, range)| {
                let f = &f;
                let range = range.clone();
                scope.spawn(move || -> Result<T> {
                    pin_current_thread(cpu)?;
                    Ok(f(range))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("kernel shard panicked"))
            .collect()
    })
}

/// Scalar adds over n floats: exactly n - 1 additions however it is
/// sharded (each shard folds len - 1 times, combining folds shards - 1).
pub struct SumReduction {
    n: usize,
    cpus: Vec<usize>,
    data: Vec<f32>,
    sink: f32,
}

impl SumReduction {
    pub fn new(n: usize, cpus: Vec<usize>) -> Result<SumReduction> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("sum over {n} elements is degenerate")));
        }
        Ok(SumReduction { n, cpus, data: Vec::new(), sink: 0.0 })
    }

    pub fn sink(&self) -> f32 {
        self.sink
    }
}

fn fold_sum(chunk: &[f32]) -> f32 {
    // Sequential fold: f32 addition is not associative, so the optimizer
    // cannot vectorize this into packed adds. len - 1 scalar adds.
    chunk[1..].iter().fold(chunk[0], |acc, &x| acc + x)
}

impl SyntheticKernel for SumReduction {
    fn name(&self) -> &str {
        "sum_reduction"
    }

    fn element_count(&self) -> usize {
        self.n
    }

    fn init(&mut self, seed: u64) -> Result<()> {
        let n = self.n;
        fill_uniform(&mut self.data, n, seed, 0.0, 1.0);
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        if self.data.len() != self.n {
            return Err(Error::InvalidInput("execute before init".into()));
        }
        let data = &self.data;
        let partial = run_sharded(&self.cpus, self.n, |r| fold_sum(&data[r]))?;
        self.sink = std::hint::black_box(fold_sum(&partial));
        Ok(())
    }

    fn analytic_work(&self) -> Option<u64> {
        Some(self.n as u64 - 1)
    }

    fn analytic_cold_traffic(&self) -> TrafficRange {
        TrafficRange::exact(4 * self.n as u64)
    }

    fn footprint_bytes(&self) -> u64 {
        4 * self.n as u64
    }

    fn parallelizable(&self) -> bool {
        true
    }
}

/// `a[i] = b[i] + s * c[i]`: 2n FLOP, 12n bytes mandatory plus up to 4n of
/// write-allocate on the output array.
pub struct Triad {
    n: usize,
    cpus: Vec<usize>,
    a: Vec<f32>,
    b: Vec<f32>,
    c: Vec<f32>,
    scale: f32,
    sink: f32,
}

impl Triad {
    pub fn new(n: usize, cpus: Vec<usize>) -> Result<Triad> {
        if n == 0 {
            return Err(Error::InvalidInput("empty triad".into()));
        }
        Ok(Triad { n, cpus, a: Vec::new(), b: Vec::new(), c: Vec::new(), scale: 0.0, sink: 0.0 })
    }
}

impl SyntheticKernel for Triad {
    fn name(&self) -> &str {
        "triad"
    }

    fn element_count(&self) -> usize {
        self.n
    }

    fn init(&mut self, seed: u64) -> Result<()> {
        let n = self.n;
        fill_uniform(&mut self.b, n, seed, 0.0, 1.0);
        fill_uniform(&mut self.c, n, seed.wrapping_add(1), 0.0, 1.0);
        self.a = vec![0.0; n];
        self.scale = 3.0;
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        if self.a.len() != self.n {
            return Err(Error::InvalidInput("execute before init".into()));
        }
        let (b, c, s) = (&self.b, &self.c, self.scale);
        // Each shard owns a disjoint slice of `a`; hand workers raw parts so
        // the borrow checker does not serialize them.
        let a_ptr = self.a.as_mut_ptr() as usize;
        run_sharded(&self.cpus, self.n, |r| {
            let a = unsafe {
                std::slice::from_raw_parts_mut((a_ptr as *mut f32).add(r.start), r.len())
            };
            for (i, ai) in r.clone().zip(a.iter_mut()) {
                *ai = b[i] + s * c[i];
            }
        })?;
        self.sink = std::hint::black_box(self.a[self.n / 2]);
        Ok(())
    }

    fn analytic_work(&self) -> Option<u64> {
        Some(2 * self.n as u64)
    }

    fn analytic_cold_traffic(&self) -> TrafficRange {
        TrafficRange { min_bytes: 12 * self.n as u64, max_bytes: 16 * self.n as u64 }
    }

    fn footprint_bytes(&self) -> u64 {
        12 * self.n as u64
    }

    fn parallelizable(&self) -> bool {
        true
    }
}

/// Register-resident FMA loop: the compute-bound pole of the model. The
/// footprint is the code bytes themselves, so intensity is effectively
/// unbounded. `n` is the total FMA instruction count across all workers,
/// rounded up to whole unrolled iterations per worker.
pub struct FmaDense {
    requested: usize,
    cpus: Vec<usize>,
    isa: VectorIsa,
    stream: Option<CodeStream>,
    iters_per_worker: u64,
}

const FMA_DENSE_UNROLL: usize = 10;

impl FmaDense {
    pub fn new(n: usize, cpus: Vec<usize>) -> Result<FmaDense> {
        Self::with_isa(n, cpus, None)
    }

    pub fn with_isa(n: usize, cpus: Vec<usize>, isa: Option<VectorIsa>) -> Result<FmaDense> {
        if n == 0 {
            return Err(Error::InvalidInput("zero FMA instructions".into()));
        }
        if cpus.is_empty() {
            return Err(Error::InvalidInput("kernel has no CPUs to run on".into()));
        }
        let isa = match isa {
            Some(i) => i,
            None => detect_isa()?,
        };
        let per_worker = (n as u64).div_ceil(cpus.len() as u64);
        let iters_per_worker = per_worker.div_ceil(FMA_DENSE_UNROLL as u64);
        Ok(FmaDense { requested: n, cpus, isa, stream: None, iters_per_worker })
    }

    pub fn isa(&self) -> VectorIsa {
        self.isa
    }

    /// FMA instructions actually retired per execute.
    pub fn total_fma(&self) -> u64 {
        self.iters_per_worker * FMA_DENSE_UNROLL as u64 * self.cpus.len() as u64
    }
}

impl SyntheticKernel for FmaDense {
    fn name(&self) -> &str {
        "fma_dense"
    }

    fn element_count(&self) -> usize {
        self.total_fma() as usize
    }

    fn init(&mut self, _seed: u64) -> Result<()> {
        let config = ComputeBenchConfig {
            n_accumulators: FMA_DENSE_UNROLL,
            unroll: FMA_DENSE_UNROLL,
            inner_iterations: self.iters_per_worker,
            ..ComputeBenchConfig::default()
        };
        self.stream = Some(emit_fma_stream(self.isa, &config)?);
        let _ = self.requested;
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        let stream = self
            .stream
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("execute before init".into()))?;
        run_sharded(&self.cpus, self.cpus.len(), |_| stream.call())?;
        Ok(())
    }

    fn analytic_work(&self) -> Option<u64> {
        Some(self.isa.flops_per_fma() * self.total_fma())
    }

    fn analytic_cold_traffic(&self) -> TrafficRange {
        // Code bytes plus stacks; negligible against any real buffer.
        TrafficRange { min_bytes: 0, max_bytes: self.footprint_bytes() }
    }

    fn footprint_bytes(&self) -> u64 {
        self.stream.as_ref().map_or(4096, |s| s.bytes().len() as u64)
    }

    fn parallelizable(&self) -> bool {
        true
    }
}

/// Scalar max over n floats: n - 1 real comparisons that the FP counters
/// never see. Exists to demonstrate the counting method's stated limit.
pub struct MaxReduction {
    n: usize,
    cpus: Vec<usize>,
    data: Vec<f32>,
    sink: f32,
}

impl MaxReduction {
    pub fn new(n: usize, cpus: Vec<usize>) -> Result<MaxReduction> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("max over {n} elements is degenerate")));
        }
        Ok(MaxReduction { n, cpus, data: Vec::new(), sink: 0.0 })
    }
}

fn fold_max(chunk: &[f32]) -> f32 {
    chunk[1..].iter().fold(chunk[0], |acc, &x| acc.max(x))
}

impl SyntheticKernel for MaxReduction {
    fn name(&self) -> &str {
        "max_reduction"
    }

    fn element_count(&self) -> usize {
        self.n
    }

    fn init(&mut self, seed: u64) -> Result<()> {
        let n = self.n;
        fill_uniform(&mut self.data, n, seed, 0.0, 1.0);
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        if self.data.len() != self.n {
            return Err(Error::InvalidInput("execute before init".into()));
        }
        let data = &self.data;
        let partial = run_sharded(&self.cpus, self.n, |r| fold_max(&data[r]))?;
        self.sink = std::hint::black_box(fold_max(&partial));
        Ok(())
    }

    /// The true operation count; the measured figure is expected near zero.
    fn analytic_work(&self) -> Option<u64> {
        Some(self.n as u64 - 1)
    }

    fn analytic_cold_traffic(&self) -> TrafficRange {
        TrafficRange::exact(4 * self.n as u64)
    }

    fn footprint_bytes(&self) -> u64 {
        4 * self.n as u64
    }

    fn parallelizable(&self) -> bool {
        true
    }

    fn work_pmu_visible(&self) -> bool {
        false
    }
}

/// Elementwise tanh-approximation GELU. Per-element FLOP depends on how the
/// math library expands tanh, so the work formula is deliberately absent;
/// the harness calibrates FLOP/element from the measurement itself.
pub struct GeluElementwise {
    n: usize,
    cpus: Vec<usize>,
    x: Vec<f32>,
    y: Vec<f32>,
    sink: f32,
}

impl GeluElementwise {
    pub fn new(n: usize, cpus: Vec<usize>) -> Result<GeluElementwise> {
        if n == 0 {
            return Err(Error::InvalidInput("empty gelu".into()));
        }
        Ok(GeluElementwise { n, cpus, x: Vec::new(), y: Vec::new(), sink: 0.0 })
    }
}

#[inline]
fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.7978845608;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

impl SyntheticKernel for GeluElementwise {
    fn name(&self) -> &str {
        "gelu_elementwise"
    }

    fn element_count(&self) -> usize {
        self.n
    }

    fn init(&mut self, seed: u64) -> Result<()> {
        let n = self.n;
        fill_uniform(&mut self.x, n, seed, -3.0, 3.0);
        self.y = vec![0.0; n];
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        if self.x.len() != self.n {
            return Err(Error::InvalidInput("execute before init".into()));
        }
        let x = &self.x;
        let y_ptr = self.y.as_mut_ptr() as usize;
        run_sharded(&self.cpus, self.n, |r| {
            let y = unsafe {
                std::slice::from_raw_parts_mut((y_ptr as *mut f32).add(r.start), r.len())
            };
            for (i, yi) in r.clone().zip(y.iter_mut()) {
                *yi = gelu(x[i]);
            }
        })?;
        self.sink = std::hint::black_box(self.y[self.n / 2]);
        Ok(())
    }

    fn analytic_work(&self) -> Option<u64> {
        None
    }

    fn analytic_cold_traffic(&self) -> TrafficRange {
        TrafficRange { min_bytes: 8 * self.n as u64, max_bytes: 12 * self.n as u64 }
    }

    fn footprint_bytes(&self) -> u64 {
        8 * self.n as u64
    }

    fn parallelizable(&self) -> bool {
        true
    }
}

/// Registry order is the CLI's default execution order.
pub const KERNEL_NAMES: [&str; 5] =
    ["sum_reduction", "triad", "fma_dense", "max_reduction", "gelu_elementwise"];

/// Element counts used when the CLI does not override n: array kernels get
/// buffers well past any LLC so cold traffic is meaningful; fma_dense gets
/// the canonical one-million instruction stream.
pub fn default_element_count(name: &str) -> Option<usize> {
    match name {
        "sum_reduction" | "max_reduction" => Some(1 << 24),
        "triad" => Some(1 << 23),
        "gelu_elementwise" => Some(1 << 23),
        "fma_dense" => Some(1_000_000),
        _ => None,
    }
}

pub fn build_kernel(name: &str, n: usize, cpus: Vec<usize>) -> Result<Box<dyn SyntheticKernel>> {
    Ok(match name {
        "sum_reduction" => Box::new(SumReduction::new(n, cpus)?),
        "triad" => Box::new(Triad::new(n, cpus)?),
        "fma_dense" => Box::new(FmaDense::new(n, cpus)?),
        "max_reduction" => Box::new(MaxReduction::new(n, cpus)?),
        "gelu_elementwise" => Box::new(GeluElementwise::new(n, cpus)?),
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown kernel {other:?}; available: {}",
                KERNEL_NAMES.join(", ")
            )))
        }
    })
}
