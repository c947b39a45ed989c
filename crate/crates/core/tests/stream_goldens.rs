//! Emitted byte streams pinned to reference-assembler output. The .bin
//! fixtures were produced from the committed .s sources with GNU as and
//! objcopy; regenerate with those tools if the stream shape ever changes.

use roofline_core::codegen::{
    emit_stream_bytes, scan_raw_distance, verify_raw_free, ComputeBenchConfig, StreamOp,
    VectorIsa,
};
use roofline_core::topology::fixture_path;

fn golden(name: &str) -> Vec<u8> {
    let path = fixture_path("../streams").join(format!("{name}.bin"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check(name: &str, isa: VectorIsa, op: StreamOp, n_acc: usize, unroll: usize) {
    let config = ComputeBenchConfig {
        n_accumulators: n_acc,
        unroll,
        inner_iterations: 1,
        min_duration_seconds: 1.0,
    };
    let (bytes, meta) = emit_stream_bytes(isa, op, &config).unwrap();
    let expect = golden(name);
    assert_eq!(
        bytes, expect,
        "{name}: emitted stream diverges from assembler reference"
    );
    verify_raw_free(&bytes, &meta).unwrap();
}

#[test]
fn avx512_fma_default_shape_matches_reference() {
    check(
        "avx512_fma_acc10_unroll30",
        VectorIsa::Avx512,
        StreamOp::Fma,
        10,
        30,
    );
}

#[test]
fn avx512_fma_six_block_matches_reference() {
    check(
        "avx512_fma_acc6_unroll6",
        VectorIsa::Avx512,
        StreamOp::Fma,
        6,
        6,
    );
}

#[test]
fn avx256_fma_matches_reference() {
    check(
        "avx256_fma_acc8_unroll16",
        VectorIsa::Avx256,
        StreamOp::Fma,
        8,
        16,
    );
}

#[test]
fn sse128_add_matches_reference() {
    check(
        "sse128_add_acc6_unroll6",
        VectorIsa::Sse128,
        StreamOp::Add,
        6,
        6,
    );
}

#[test]
fn scalar_fma_matches_reference() {
    check(
        "scalar_fma_acc6_unroll6",
        VectorIsa::Scalar,
        StreamOp::Fma,
        6,
        6,
    );
}

#[test]
fn avx512_add_high_registers_matches_reference() {
    check(
        "avx512_add_acc12_unroll12",
        VectorIsa::Avx512,
        StreamOp::Add,
        12,
        12,
    );
}

#[test]
fn six_instruction_block_starts_with_known_encoding() {
    // vfmadd132ps zmm0, zmm6, zmm7 right after the 8 zeroing instructions.
    let config = ComputeBenchConfig {
        n_accumulators: 6,
        unroll: 6,
        inner_iterations: 1,
        min_duration_seconds: 1.0,
    };
    let (bytes, meta) = emit_stream_bytes(VectorIsa::Avx512, StreamOp::Fma, &config).unwrap();
    assert_eq!(
        &bytes[meta.body_offset..meta.body_offset + 6],
        &[0x62, 0xF2, 0x4D, 0x48, 0x98, 0xC7]
    );
    assert_eq!(scan_raw_distance(&bytes, &meta).unwrap(), 6);
}
