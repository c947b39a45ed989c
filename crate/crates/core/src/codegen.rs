//! Peak-compute measurement via runtime-emitted FMA machine code.
//!
//! The benchmark body is a loop of dependency-free FMA instructions: the
//! destination register cycles round-robin through `n_accumulators`
//! registers while both sources stay fixed, so no instruction reads a
//! register written within the preceding `n_accumulators - 1` instructions
//! and the pipeline is limited by issue width, not by the FMA latency
//! chain. Matching vector-add streams exist for counter validation (N adds
//! bump the lane counter by N, N FMAs by 2N).
//!
//! The emitter assembles VEX/EVEX encodings directly; golden tests pin the
//! byte sequences to reference-assembler output. A static scan decodes the
//! register fields back out of the emitted bytes to verify the
//! read-after-write-free property independently of the emitter's intent.

use std::fmt;
use std::sync::Barrier;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{pin_current_thread, Scenario};

/// Vector width tier of the emitted stream. Every tier is FMA3-based and
/// therefore VEX/EVEX encoded; Scalar means one f32 lane, not legacy SSE
/// encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorIsa {
    Scalar,
    Sse128,
    Avx256,
    Avx512,
}

impl VectorIsa {
    pub fn lanes_f32(&self) -> u64 {
        match self {
            VectorIsa::Scalar => 1,
            VectorIsa::Sse128 => 4,
            VectorIsa::Avx256 => 8,
            VectorIsa::Avx512 => 16,
        }
    }

    /// One fused multiply-add does a multiply and an add per lane.
    pub fn flops_per_fma(&self) -> u64 {
        2 * self.lanes_f32()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VectorIsa::Scalar => "scalar",
            VectorIsa::Sse128 => "sse128",
            VectorIsa::Avx256 => "avx256",
            VectorIsa::Avx512 => "avx512",
        }
    }

    /// Maps host/mock descriptor spellings ("avx2", "avx512", ...) to a tier.
    pub fn from_descriptor(desc: &str) -> Result<VectorIsa> {
        match desc.to_ascii_lowercase().as_str() {
            "avx512" | "avx512f" => Ok(VectorIsa::Avx512),
            "avx256" | "avx2" | "avx" => Ok(VectorIsa::Avx256),
            "sse128" | "sse" | "sse2" => Ok(VectorIsa::Sse128),
            "scalar" => Ok(VectorIsa::Scalar),
            other => Err(Error::InvalidInput(format!(
                "unknown ISA descriptor '{other}'"
            ))),
        }
    }
}

impl fmt::Display for VectorIsa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stream flavor: FMA for the throughput benchmark, Add for validating the
/// counters' factor-of-two FMA behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamOp {
    Fma,
    Add,
}

/// Shape of the emitted benchmark code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeBenchConfig {
    /// Independent destination registers. FMA latency (4-5 cycles) times two
    /// ports needs at least 8-10 in-flight chains; 10 leaves margin.
    pub n_accumulators: usize,
    /// Vector instructions per loop body; multiple of n_accumulators so the
    /// round-robin wraps evenly across iterations.
    pub unroll: usize,
    /// Loop iterations per call into the emitted code.
    pub inner_iterations: u64,
    /// Per-scenario benchmark duration floor.
    pub min_duration_seconds: f64,
}

impl Default for ComputeBenchConfig {
    fn default() -> Self {
        ComputeBenchConfig {
            n_accumulators: 10,
            unroll: 30,
            inner_iterations: 100_000,
            min_duration_seconds: 2.0,
        }
    }
}

impl ComputeBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_accumulators < 6 {
            return Err(Error::InvalidInput(format!(
                "{} accumulators cannot cover the FMA latency-throughput product (minimum 6)",
                self.n_accumulators
            )));
        }
        // Registers: accumulators 0..n-1 plus two fixed sources, all within
        // the VEX-addressable 16.
        if self.n_accumulators > 14 {
            return Err(Error::InvalidInput(format!(
                "{} accumulators plus 2 source registers exceeds the 16 vector registers",
                self.n_accumulators
            )));
        }
        if self.unroll == 0 || self.unroll % self.n_accumulators != 0 {
            return Err(Error::InvalidInput(format!(
                "unroll {} is not a positive multiple of {} accumulators",
                self.unroll, self.n_accumulators
            )));
        }
        if self.inner_iterations == 0 {
            return Err(Error::InvalidInput("zero inner iterations".into()));
        }
        if !(self.min_duration_seconds > 0.0) {
            return Err(Error::InvalidInput("non-positive benchmark duration".into()));
        }
        Ok(())
    }
}

/// Where things sit inside the emitted byte stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamMeta {
    pub isa: VectorIsa,
    pub op: StreamOp,
    pub n_accumulators: usize,
    pub unroll: usize,
    pub body_offset: usize,
    /// All body instructions of one stream encode to the same length.
    pub instr_len: usize,
}

/// Aggregated result of one peak-compute run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeBenchResult {
    pub scenario: Scenario,
    pub isa: VectorIsa,
    pub gflops: f64,
    pub per_thread_gflops: Vec<f64>,
    pub total_fma_retired: u64,
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

// Opcode maps.
const MAP_0F: u8 = 1;
const MAP_0F38: u8 = 2;
// Mandatory-prefix field values.
const PP_NONE: u8 = 0;
const PP_66: u8 = 1;
const PP_F3: u8 = 2;

fn modrm_reg(reg: u8, rm: u8) -> u8 {
    0xC0 | ((reg & 7) << 3) | (rm & 7)
}

/// EVEX-encoded register-to-register instruction (no masking, no
/// broadcast). `ll` is the vector length field: 0=128, 1=256, 2=512.
fn emit_evex(out: &mut Vec<u8>, mm: u8, pp: u8, ll: u8, opcode: u8, reg: u8, vvvv: u8, rm: u8) {
    let r = (!(reg >> 3)) & 1;
    let x = (!(rm >> 4)) & 1; // X extends rm to bit 4 for register operands
    let b = (!(rm >> 3)) & 1;
    let r_hi = (!(reg >> 4)) & 1;
    let p0 = (r << 7) | (x << 6) | (b << 5) | (r_hi << 4) | mm;
    let p1 = ((!vvvv & 0xF) << 3) | (1 << 2) | pp; // W=0
    let v_hi = (!(vvvv >> 4)) & 1;
    let p2 = (ll << 5) | (v_hi << 3); // z=0, b=0, aaa=0
    out.extend_from_slice(&[0x62, p0, p1, p2, opcode, modrm_reg(reg, rm)]);
}

/// VEX-encoded register-to-register instruction, taking the two-byte form
/// whenever it can express the operands (map 0F, W=0, rm below 8), as the
/// reference assembler does.
fn emit_vex(out: &mut Vec<u8>, mm: u8, pp: u8, l: u8, opcode: u8, reg: u8, vvvv: u8, rm: u8) {
    let r = (!(reg >> 3)) & 1;
    let b = (!(rm >> 3)) & 1;
    if mm == MAP_0F && b == 1 {
        let b1 = (r << 7) | ((!vvvv & 0xF) << 3) | (l << 2) | pp;
        out.extend_from_slice(&[0xC5, b1, opcode, modrm_reg(reg, rm)]);
    } else {
        let b1 = (r << 7) | (1 << 6) | (b << 5) | mm; // X=1
        let b2 = ((!vvvv & 0xF) << 3) | (l << 2) | pp; // W=0
        out.extend_from_slice(&[0xC4, b1, b2, opcode, modrm_reg(reg, rm)]);
    }
}

fn emit_vector_instr(out: &mut Vec<u8>, isa: VectorIsa, op: StreamOp, dst: u8, src2: u8, rm: u8) {
    match (isa, op) {
        // vfmadd132ps / vfmadd132ss: dst = dst*rm + src2
        (VectorIsa::Avx512, StreamOp::Fma) => emit_evex(out, MAP_0F38, PP_66, 2, 0x98, dst, src2, rm),
        (VectorIsa::Avx256, StreamOp::Fma) => emit_vex(out, MAP_0F38, PP_66, 1, 0x98, dst, src2, rm),
        (VectorIsa::Sse128, StreamOp::Fma) => emit_vex(out, MAP_0F38, PP_66, 0, 0x98, dst, src2, rm),
        (VectorIsa::Scalar, StreamOp::Fma) => emit_vex(out, MAP_0F38, PP_66, 0, 0x99, dst, src2, rm),
        // vaddps / vaddss: dst = src2 + rm
        (VectorIsa::Avx512, StreamOp::Add) => emit_evex(out, MAP_0F, PP_NONE, 2, 0x58, dst, src2, rm),
        (VectorIsa::Avx256, StreamOp::Add) => emit_vex(out, MAP_0F, PP_NONE, 1, 0x58, dst, src2, rm),
        (VectorIsa::Sse128, StreamOp::Add) => emit_vex(out, MAP_0F, PP_NONE, 0, 0x58, dst, src2, rm),
        (VectorIsa::Scalar, StreamOp::Add) => emit_vex(out, MAP_0F, PP_F3, 0, 0x58, dst, src2, rm),
    }
}

fn emit_zero_reg(out: &mut Vec<u8>, isa: VectorIsa, reg: u8) {
    match isa {
        // vpxord: the base 512-bit extension has no vxorps for full-width
        // registers, the integer form works everywhere.
        VectorIsa::Avx512 => emit_evex(out, MAP_0F, PP_66, 2, 0xEF, reg, reg, reg),
        VectorIsa::Avx256 => emit_vex(out, MAP_0F, PP_NONE, 1, 0x57, reg, reg, reg),
        VectorIsa::Sse128 | VectorIsa::Scalar => {
            emit_vex(out, MAP_0F, PP_NONE, 0, 0x57, reg, reg, reg)
        }
    }
}

/// Emits the full stream: zero the accumulator and source registers, then a
/// countable loop (`rdi` = iteration count, System V first argument) whose
/// body is `unroll` vector instructions cycling destinations round-robin
/// with fixed sources.
pub fn emit_stream_bytes(
    isa: VectorIsa,
    op: StreamOp,
    config: &ComputeBenchConfig,
) -> Result<(Vec<u8>, StreamMeta)> {
    config.validate()?;
    let n_acc = config.n_accumulators as u8;
    let (src2, src_rm) = (n_acc, n_acc + 1);

    let mut out = Vec::new();
    for reg in 0..=src_rm {
        emit_zero_reg(&mut out, isa, reg);
    }
    let body_offset = out.len();
    for i in 0..config.unroll {
        let dst = (i % config.n_accumulators) as u8;
        emit_vector_instr(&mut out, isa, op, dst, src2, src_rm);
    }
    let instr_len = (out.len() - body_offset) / config.unroll;

    // sub rdi, 1
    out.extend_from_slice(&[0x48, 0x83, 0xEF, 0x01]);
    // jnz body (shortest form that reaches, as an assembler would pick)
    let rel8 = body_offset as i64 - (out.len() as i64 + 2);
    if (-128..=127).contains(&rel8) {
        out.extend_from_slice(&[0x75, rel8 as u8]);
    } else {
        let rel32 = (body_offset as i64 - (out.len() as i64 + 6)) as i32;
        out.push(0x0F);
        out.push(0x85);
        out.extend_from_slice(&rel32.to_le_bytes());
    }
    // Wide register state ends at the stream boundary.
    if matches!(isa, VectorIsa::Avx256 | VectorIsa::Avx512) {
        out.extend_from_slice(&[0xC5, 0xF8, 0x77]); // vzeroupper
    }
    out.push(0xC3); // ret

    Ok((
        out,
        StreamMeta {
            isa,
            op,
            n_accumulators: config.n_accumulators,
            unroll: config.unroll,
            body_offset,
            instr_len,
        },
    ))
}

// ---------------------------------------------------------------------------
// Static read-after-write scan
// ---------------------------------------------------------------------------

/// Register fields decoded back out of one body instruction.
#[derive(Debug, PartialEq, Eq)]
struct DecodedInstr {
    dest: u8,
    vvvv: u8,
    rm: u8,
    opcode: u8,
}

fn decode_instr(bytes: &[u8]) -> Result<DecodedInstr> {
    let bad = |what: &str| Error::Codegen(format!("stream scan: {what}"));
    match bytes.first() {
        Some(0x62) => {
            if bytes.len() < 6 {
                return Err(bad("truncated EVEX instruction"));
            }
            let (p0, p1, p2, opcode, modrm) = (bytes[1], bytes[2], bytes[3], bytes[4], bytes[5]);
            let dest = ((!(p0 >> 7) & 1) << 3) | ((!(p0 >> 4) & 1) << 4) | ((modrm >> 3) & 7);
            let rm = ((!(p0 >> 5) & 1) << 3) | ((!(p0 >> 6) & 1) << 4) | (modrm & 7);
            let vvvv = (!(p1 >> 3) & 0xF) | ((!(p2 >> 3) & 1) << 4);
            Ok(DecodedInstr { dest, vvvv, rm, opcode })
        }
        Some(0xC4) => {
            if bytes.len() < 5 {
                return Err(bad("truncated VEX instruction"));
            }
            let (b1, b2, opcode, modrm) = (bytes[1], bytes[2], bytes[3], bytes[4]);
            let dest = ((!(b1 >> 7) & 1) << 3) | ((modrm >> 3) & 7);
            let rm = ((!(b1 >> 5) & 1) << 3) | (modrm & 7);
            let vvvv = !(b2 >> 3) & 0xF;
            Ok(DecodedInstr { dest, vvvv, rm, opcode })
        }
        Some(0xC5) => {
            if bytes.len() < 4 {
                return Err(bad("truncated VEX instruction"));
            }
            let (b1, opcode, modrm) = (bytes[1], bytes[2], bytes[3]);
            let dest = ((!(b1 >> 7) & 1) << 3) | ((modrm >> 3) & 7);
            Ok(DecodedInstr {
                dest,
                vvvv: !(b1 >> 3) & 0xF,
                rm: modrm & 7,
                opcode,
            })
        }
        _ => Err(bad("unknown instruction prefix")),
    }
}

/// Decodes the loop body's register fields from the raw bytes and returns
/// the smallest write-to-read distance, in instructions. The stream is
/// dependency-free when this is at least `n_accumulators` (equivalently: no
/// window of `n_accumulators - 1` preceding instructions contains a writer
/// of any current source). The FMA 132 form reads its own destination, so
/// distances include the accumulator self-dependency.
pub fn scan_raw_distance(bytes: &[u8], meta: &StreamMeta) -> Result<usize> {
    let mut last_write: [Option<usize>; 32] = [None; 32];
    let mut min_distance = usize::MAX;
    // The loop wraps: model two passes so loop-carried dependencies count.
    for pass in 0..2usize {
        for i in 0..meta.unroll {
            let at = meta.body_offset + i * meta.instr_len;
            let d = decode_instr(
                bytes
                    .get(at..at + meta.instr_len)
                    .ok_or_else(|| Error::Codegen("stream scan: body out of range".into()))?,
            )?;
            let position = pass * meta.unroll + i;
            let mut reads = vec![d.vvvv, d.rm];
            if meta.op == StreamOp::Fma {
                reads.push(d.dest);
            }
            for r in reads {
                if let Some(w) = last_write[r as usize] {
                    min_distance = min_distance.min(position - w);
                }
            }
            last_write[d.dest as usize] = Some(position);
        }
    }
    Ok(min_distance)
}

/// Asserts the stream's dependency-free property.
pub fn verify_raw_free(bytes: &[u8], meta: &StreamMeta) -> Result<()> {
    let distance = scan_raw_distance(bytes, meta)?;
    if distance < meta.n_accumulators {
        return Err(Error::Codegen(format!(
            "read-after-write hazard: distance {distance} with {} accumulators",
            meta.n_accumulators
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Executable installation
// ---------------------------------------------------------------------------

/// Anonymous executable memory holding one emitted stream. Mapped writable
/// for the copy, then flipped to read+execute (never both at once).
pub struct ExecutableCode {
    ptr: *mut u8,
    len: usize,
}

unsafe impl Send for ExecutableCode {}
unsafe impl Sync for ExecutableCode {}

impl ExecutableCode {
    pub fn install(bytes: &[u8]) -> Result<ExecutableCode> {
        let len = bytes.len().max(1);
        let ptr = crate::topology::map_anonymous(len).map_err(|e| {
            Error::Codegen(format!("cannot map code buffer: {e}"))
        })?;
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), ptr, bytes.len());
            if libc::mprotect(ptr.cast(), len, libc::PROT_READ | libc::PROT_EXEC) != 0 {
                let err = std::io::Error::last_os_error();
                libc::munmap(ptr.cast(), len);
                return Err(Error::Codegen(format!(
                    "executable memory denied: {err} (W^X or seccomp policy may forbid \
                     PROT_EXEC on anonymous mappings)"
                )));
            }
        }
        Ok(ExecutableCode { ptr, len })
    }

    /// # Safety
    /// The installed bytes must be a valid function following the System V
    /// ABI taking one integer argument; emit_stream_bytes output qualifies
    /// on hosts supporting the stream's ISA tier.
    unsafe fn entry(&self) -> extern "C" fn(u64) {
        std::mem::transmute::<*mut u8, extern "C" fn(u64)>(self.ptr)
    }
}

impl Drop for ExecutableCode {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.cast(), self.len);
        }
    }
}

/// An installed stream plus its exact operation accounting.
pub struct CodeStream {
    bytes: Vec<u8>,
    meta: StreamMeta,
    code: ExecutableCode,
    config: ComputeBenchConfig,
}

impl CodeStream {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn meta(&self) -> &StreamMeta {
        &self.meta
    }

    /// Vector instructions retired by one call: unroll × inner_iterations.
    pub fn ops_per_call(&self) -> u64 {
        self.meta.unroll as u64 * self.config.inner_iterations
    }

    /// FLOP per call; FMA counts 2 per lane, Add counts 1.
    pub fn flops_per_call(&self) -> u64 {
        let per_op = match self.meta.op {
            StreamOp::Fma => self.meta.isa.flops_per_fma(),
            StreamOp::Add => self.meta.isa.lanes_f32(),
        };
        self.ops_per_call() * per_op
    }

    /// Runs the stream for its configured inner iterations.
    pub fn call(&self) {
        unsafe { (self.code.entry())(self.config.inner_iterations) }
    }
}

/// Emits, verifies and installs the FMA throughput stream.
pub fn emit_fma_stream(isa: VectorIsa, config: &ComputeBenchConfig) -> Result<CodeStream> {
    emit_stream(isa, StreamOp::Fma, config)
}

/// Emits the vector-add validation stream (same shape, additive counters).
pub fn emit_add_stream(isa: VectorIsa, config: &ComputeBenchConfig) -> Result<CodeStream> {
    emit_stream(isa, StreamOp::Add, config)
}

fn emit_stream(isa: VectorIsa, op: StreamOp, config: &ComputeBenchConfig) -> Result<CodeStream> {
    let (bytes, meta) = emit_stream_bytes(isa, op, config)?;
    verify_raw_free(&bytes, &meta)?;
    let code = ExecutableCode::install(&bytes)?;
    Ok(CodeStream {
        bytes,
        meta,
        code,
        config: *config,
    })
}

// ---------------------------------------------------------------------------
// ISA detection and the benchmark runner
// ---------------------------------------------------------------------------

/// Widest FMA3-capable tier the host supports.
#[cfg(target_arch = "x86_64")]
pub fn detect_isa() -> Result<VectorIsa> {
    if !is_x86_feature_detected!("fma") {
        return Err(Error::Codegen(
            "unsupported architecture: host lacks FMA3".into(),
        ));
    }
    if is_x86_feature_detected!("avx512f") {
        Ok(VectorIsa::Avx512)
    } else if is_x86_feature_detected!("avx2") {
        Ok(VectorIsa::Avx256)
    } else {
        Ok(VectorIsa::Sse128)
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn detect_isa() -> Result<VectorIsa> {
    Err(Error::Codegen("unsupported architecture: not x86_64".into()))
}

/// Benchmarks peak compute on the scenario's CPUs with the host's widest
/// ISA tier.
pub fn run_peak_compute(
    scenario: &Scenario,
    config: &ComputeBenchConfig,
) -> Result<ComputeBenchResult> {
    run_peak_compute_as(scenario, detect_isa()?, config)
}

/// One pinned worker per scenario CPU, all released together, each looping
/// the stream until the duration floor. Per-thread rates come from exact
/// whole-call counts over the time to the last completed call, never from
/// extrapolation mid-call.
pub fn run_peak_compute_as(
    scenario: &Scenario,
    isa: VectorIsa,
    config: &ComputeBenchConfig,
) -> Result<ComputeBenchResult> {
    config.validate()?;
    let stream = emit_fma_stream(isa, config)?;
    let flops_per_call = stream.flops_per_call();
    let ops_per_call = stream.ops_per_call();
    let barrier = Barrier::new(scenario.cpu_set.len());

    let per_thread: Vec<(f64, u64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenario
            .cpu_set
            .iter()
            .map(|&cpu| {
                let stream = &stream;
                let barrier = &barrier;
                scope.spawn(move || -> Result<(f64, u64)> {
                    pin_current_thread(cpu)?;
                    barrier.wait();
                    let started = Instant::now();
                    let mut calls = 0u64;
                    loop {
                        stream.call();
                        calls += 1;
                        let elapsed = started.elapsed().as_secs_f64();
                        if elapsed >= config.min_duration_seconds {
                            let gflops =
                                (calls * flops_per_call) as f64 / elapsed / crate::roofline::GIGA;
                            return Ok((gflops, calls * ops_per_call));
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("peak-compute worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    Ok(ComputeBenchResult {
        scenario: scenario.clone(),
        isa,
        gflops: per_thread.iter().map(|(g, _)| g).sum(),
        per_thread_gflops: per_thread.iter().map(|(g, _)| *g).collect(),
        total_fma_retired: per_thread.iter().map(|(_, c)| c).sum(),
    })
}

/// Scripted-clock variant: each scenario CPU is simulated serially with a
/// fixed per-call duration, so the result is a pure function of the inputs.
pub fn mock_peak_compute(
    scenario: &Scenario,
    isa: VectorIsa,
    config: &ComputeBenchConfig,
    seconds_per_call: f64,
) -> Result<ComputeBenchResult> {
    config.validate()?;
    if !(seconds_per_call > 0.0) {
        return Err(Error::MockScript(format!(
            "non-positive seconds_per_call {seconds_per_call}"
        )));
    }
    let ops_per_call = config.unroll as u64 * config.inner_iterations;
    let flops_per_call = ops_per_call * isa.flops_per_fma();
    let mut per_thread_gflops = Vec::with_capacity(scenario.cpu_set.len());
    let mut total_ops = 0u64;
    for _cpu in &scenario.cpu_set {
        let mut elapsed = 0.0;
        let mut calls = 0u64;
        while elapsed < config.min_duration_seconds {
            elapsed += seconds_per_call;
            calls += 1;
        }
        per_thread_gflops.push((calls * flops_per_call) as f64 / elapsed / crate::roofline::GIGA);
        total_ops += calls * ops_per_call;
    }
    Ok(ComputeBenchResult {
        scenario: scenario.clone(),
        isa,
        gflops: per_thread_gflops.iter().sum(),
        per_thread_gflops,
        total_fma_retired: total_ops,
    })
}
