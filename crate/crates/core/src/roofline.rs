//! The model math: arithmetic intensity, attainable performance, ridge
//! point, bound classification, and the RC/ET percentage metrics.
//!
//! Everything here is a pure function of its arguments. Units are fixed
//! crate-wide: work in FLOP, traffic in bytes, runtime in seconds, compute
//! rates in GFLOP/s (10⁹ FLOP/s), bandwidth in GB/s (10⁹ bytes/s);
//! conversions happen only at these type boundaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::CacheKind;
use crate::pmu::CounterSample;
use crate::topology::Scenario;

/// FLOP/s (or bytes/s) per reported unit.
pub const GIGA: f64 = 1e9;

/// Attained performance above the roof beyond this factor gets flagged.
/// Single-thread memory-bound kernels can legitimately land near or past the
/// roof (the peak-bandwidth probe itself understates prefetcher-assisted
/// streams), so the point is flagged rather than rejected.
pub const ROOF_EXCESS_TOLERANCE: f64 = 0.05;

/// Peak capabilities of one resource scenario: π (peak compute) and β (peak
/// memory throughput).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub scenario: Scenario,
    pub peak_flops_gps: f64,
    pub peak_bandwidth_gbps: f64,
    pub label: String,
    pub machine_descriptor: String,
}

impl PlatformProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops_gps > 0.0) || !self.peak_flops_gps.is_finite() {
            return Err(Error::InvalidInput(format!(
                "profile '{}': peak compute must be positive, got {}",
                self.label, self.peak_flops_gps
            )));
        }
        if !(self.peak_bandwidth_gbps > 0.0) || !self.peak_bandwidth_gbps.is_finite() {
            return Err(Error::InvalidInput(format!(
                "profile '{}': peak bandwidth must be positive, got {}",
                self.label, self.peak_bandwidth_gbps
            )));
        }
        if self.label.is_empty() {
            return Err(Error::InvalidInput("profile label is empty".into()));
        }
        Ok(())
    }
}

/// One measured kernel under one scenario and cache protocol.
///
/// `work_flops` is the overhead-subtracted, lane-weighted conversion of
/// `raw_full` minus `raw_init_only`; `runtime_seconds` is the mean over
/// repetitions, with the raw per-repetition times retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeasurement {
    pub kernel_name: String,
    pub work_flops: u64,
    pub traffic_bytes: u64,
    pub runtime_seconds: f64,
    pub repetitions: u32,
    pub cache_protocol: CacheKind,
    pub scenario: Scenario,
    pub raw_full: CounterSample,
    pub raw_init_only: CounterSample,
    #[serde(default)]
    pub per_rep_runtimes: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// The kernel's size parameter n.
    #[serde(default)]
    pub element_count: u64,
    /// Measured FLOP per element, recorded for kernels without a closed-form
    /// work formula (math-library expansions vary by host).
    #[serde(default)]
    pub calibrated_flop_per_element: Option<f64>,
}

/// Warning attached when a kernel's true operations are invisible to the FP
/// counters (comparisons, exponent tricks, integer work).
pub const FLAG_WORK_NOT_MEASURABLE: &str = "work-not-measurable";
/// Warning attached when the working set is under the 1 MiB bound below
/// which controller-level traffic readings stop tracking the kernel.
pub const FLAG_TRAFFIC_UNRELIABLE: &str = "traffic-unreliable";

impl KernelMeasurement {
    pub fn validate(&self) -> Result<()> {
        if self.traffic_bytes == 0 {
            return Err(Error::InvalidInput(format!(
                "measurement '{}': zero traffic",
                self.kernel_name
            )));
        }
        if !(self.runtime_seconds > 0.0) || !self.runtime_seconds.is_finite() {
            return Err(Error::InvalidInput(format!(
                "measurement '{}': runtime must be positive, got {}",
                self.kernel_name, self.runtime_seconds
            )));
        }
        Ok(())
    }

    /// W/R in GFLOP/s.
    pub fn attained_gflops(&self) -> f64 {
        self.work_flops as f64 / self.runtime_seconds / GIGA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    MemoryBound,
    ComputeBound,
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundKind::MemoryBound => "memory-bound",
            BoundKind::ComputeBound => "compute-bound",
        })
    }
}

/// A kernel placed on a roofline: measured position plus the model's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub kernel_name: String,
    pub profile_label: String,
    pub cache_protocol: CacheKind,
    pub intensity_flops_per_byte: f64,
    pub attained_gflops: f64,
    pub attainable_gflops: f64,
    pub bound: BoundKind,
    pub rc_percent: f64,
    pub attainable_rc_percent: f64,
    pub et_percent: Option<f64>,
    /// Attained exceeded the roof by more than the tolerance.
    pub exceeds_roof: bool,
}

/// I = W/Q in FLOP per byte of controller traffic.
pub fn arithmetic_intensity(work_flops: u64, traffic_bytes: u64) -> Result<f64> {
    if traffic_bytes == 0 {
        return Err(Error::InvalidInput(
            "undefined intensity: zero traffic bytes".into(),
        ));
    }
    Ok(work_flops as f64 / traffic_bytes as f64)
}

/// The roof: P = min(π, I·β).
///
/// Branches on the ridge point rather than folding both sides into one min,
/// so P equals π exactly (to the last bit) for every intensity at or beyond
/// the ridge; rounding in I·β near the ridge can otherwise land one ulp off.
pub fn attainable_performance(profile: &PlatformProfile, intensity: f64) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "negative intensity {intensity}"
        )));
    }
    let pi = profile.peak_flops_gps;
    if intensity >= ridge_point(profile) {
        Ok(pi)
    } else {
        Ok((intensity * profile.peak_bandwidth_gbps).min(pi))
    }
}

/// Intensity where the memory roof meets the compute roof: π/β.
pub fn ridge_point(profile: &PlatformProfile) -> f64 {
    profile.peak_flops_gps / profile.peak_bandwidth_gbps
}

/// MemoryBound strictly below the ridge; the tie goes to ComputeBound since
/// the roof already equals π there.
pub fn classify_bound(profile: &PlatformProfile, intensity: f64) -> BoundKind {
    if intensity < ridge_point(profile) {
        BoundKind::MemoryBound
    } else {
        BoundKind::ComputeBound
    }
}

/// RC: attained compute as a percentage of π. Ratio first, then scale, so a
/// kernel exactly at peak reads exactly 100.
pub fn runtime_compute_percent(m: &KernelMeasurement, profile: &PlatformProfile) -> f64 {
    100.0 * (m.attained_gflops() / profile.peak_flops_gps)
}

/// The roof at `intensity` as a percentage of π: 100 exactly at and beyond
/// the ridge, strictly below 100 under it.
///
/// The memory branch scales I/ridge — the same ratio as min(π, I·β)/π — so
/// the boundary is exact: rounding in I·β near the ridge cannot make a
/// memory-bound intensity read 100%, keeping the bound classification and
/// this percentage in exact agreement.
pub fn attainable_rc_percent(profile: &PlatformProfile, intensity: f64) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "negative intensity {intensity}"
        )));
    }
    let ridge = ridge_point(profile);
    if intensity >= ridge {
        Ok(100.0)
    } else {
        Ok(100.0 * (intensity / ridge))
    }
}

/// ET: each kernel's runtime as a percentage of the named baseline's.
/// The baseline maps to 100 exactly.
pub fn relative_execution_time(
    group: &[KernelMeasurement],
    baseline: &str,
) -> Result<BTreeMap<String, f64>> {
    let base = group
        .iter()
        .find(|m| m.kernel_name == baseline)
        .ok_or_else(|| {
            let names: Vec<_> = group.iter().map(|m| m.kernel_name.as_str()).collect();
            Error::InvalidInput(format!(
                "baseline kernel '{baseline}' not in group {names:?}"
            ))
        })?;
    if group.iter().any(|m| !(m.runtime_seconds > 0.0)) {
        return Err(Error::InvalidInput(
            "relative execution time needs positive runtimes".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for m in group {
        let et = if m.kernel_name == baseline {
            100.0
        } else {
            100.0 * m.runtime_seconds / base.runtime_seconds
        };
        out.insert(m.kernel_name.clone(), et);
    }
    Ok(out)
}

/// Places one measurement on one profile's roofline.
pub fn make_point(
    profile: &PlatformProfile,
    m: &KernelMeasurement,
    et_percent: Option<f64>,
) -> Result<RooflinePoint> {
    profile.validate()?;
    m.validate()?;
    let intensity = arithmetic_intensity(m.work_flops, m.traffic_bytes)?;
    let attainable = attainable_performance(profile, intensity)?;
    let attained = m.attained_gflops();
    Ok(RooflinePoint {
        kernel_name: m.kernel_name.clone(),
        profile_label: profile.label.clone(),
        cache_protocol: m.cache_protocol,
        intensity_flops_per_byte: intensity,
        attained_gflops: attained,
        attainable_gflops: attainable,
        bound: classify_bound(profile, intensity),
        rc_percent: runtime_compute_percent(m, profile),
        attainable_rc_percent: attainable_rc_percent(profile, intensity)?,
        et_percent,
        exceeds_roof: attained > attainable * (1.0 + ROOF_EXCESS_TOLERANCE),
    })
}


#[cfg(test)]
mod properties {
    use super::tests::profile;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roof_is_min_of_branches(
            pi in 1e-3..1e6f64,
            beta in 1e-3..1e6f64,
            intensity in 0.0..1e9f64,
        ) {
            let p = profile(pi, beta);
            let got = attainable_performance(&p, intensity).unwrap();
            let ridge = ridge_point(&p);
            if intensity >= ridge {
                prop_assert_eq!(got, pi);
            } else {
                prop_assert_eq!(got, (intensity * beta).min(pi));
            }
            prop_assert!(got <= pi);
        }

        #[test]
        fn roof_hits_pi_exactly_at_ridge(pi in 1e-3..1e6f64, beta in 1e-3..1e6f64) {
            let p = profile(pi, beta);
            let ridge = ridge_point(&p);
            prop_assert_eq!(attainable_performance(&p, ridge).unwrap(), pi);
            prop_assert_eq!(attainable_rc_percent(&p, ridge).unwrap(), 100.0);
        }

        #[test]
        fn roof_is_non_decreasing(
            pi in 1e-3..1e6f64,
            beta in 1e-3..1e6f64,
            a in 0.0..1e9f64,
            b in 0.0..1e9f64,
        ) {
            let p = profile(pi, beta);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(
                attainable_performance(&p, lo).unwrap()
                    <= attainable_performance(&p, hi).unwrap()
            );
        }

        #[test]
        fn attainable_rc_bounded_and_classifies(
            pi in 1e-3..1e6f64,
            beta in 1e-3..1e6f64,
            intensity in 0.0..1e9f64,
        ) {
            let p = profile(pi, beta);
            let rc = attainable_rc_percent(&p, intensity).unwrap();
            prop_assert!((0.0..=100.0).contains(&rc));
            // MemoryBound exactly when the roof sits below 100%.
            let memory_bound = classify_bound(&p, intensity) == BoundKind::MemoryBound;
            prop_assert_eq!(memory_bound, rc < 100.0);
        }

        #[test]
        fn et_is_scale_invariant(
            runtimes in proptest::collection::vec(1e-6..1e3f64, 2..8),
            scale in 0.01..100.0f64,
        ) {
            let topo = crate::topology::MachineTopology::synthetic(1, 1, 1, 1 << 20).unwrap();
            let scenario = crate::topology::Scenario::single_thread(&topo).unwrap();
            let group: Vec<KernelMeasurement> = runtimes
                .iter()
                .enumerate()
                .map(|(i, &r)| KernelMeasurement {
                    kernel_name: format!("k{i}"),
                    work_flops: 1,
                    traffic_bytes: 1,
                    runtime_seconds: r,
                    repetitions: 3,
                    cache_protocol: CacheKind::Cold,
                    scenario: scenario.clone(),
                    raw_full: CounterSample::default(),
                    raw_init_only: CounterSample::default(),
                    per_rep_runtimes: Vec::new(),
                    warnings: Vec::new(),
                    element_count: 0,
                    calibrated_flop_per_element: None,
                })
                .collect();
            let scaled: Vec<KernelMeasurement> = group
                .iter()
                .cloned()
                .map(|mut m| { m.runtime_seconds *= scale; m })
                .collect();
            let et = relative_execution_time(&group, "k0").unwrap();
            let et_scaled = relative_execution_time(&scaled, "k0").unwrap();
            for (name, v) in &et {
                // Identical at the reported precision (two decimals).
                prop_assert_eq!(
                    format!("{:.2}", v),
                    format!("{:.2}", et_scaled[name])
                );
            }
        }

        #[test]
        fn rc_doubles_with_work(pi in 1e-3..1e6f64, work in 1u64..(1 << 50), r in 1e-6..1e3f64) {
            let p = profile(pi, 1.0);
            let topo = crate::topology::MachineTopology::synthetic(1, 1, 1, 1 << 20).unwrap();
            let scenario = crate::topology::Scenario::single_thread(&topo).unwrap();
            let mk = |w: u64| KernelMeasurement {
                kernel_name: "k".into(),
                work_flops: w,
                traffic_bytes: 1,
                runtime_seconds: r,
                repetitions: 3,
                cache_protocol: CacheKind::Warm,
                scenario: scenario.clone(),
                raw_full: CounterSample::default(),
                raw_init_only: CounterSample::default(),
                per_rep_runtimes: Vec::new(),
                warnings: Vec::new(),
                element_count: 0,
                calibrated_flop_per_element: None,
            };
            // Doubling is a power-of-two scale: exact in float arithmetic.
            prop_assert_eq!(
                runtime_compute_percent(&mk(2 * work), &p),
                2.0 * runtime_compute_percent(&mk(work), &p)
            );
        }
    }
}
