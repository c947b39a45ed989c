//! Persisted results and their renderings: a canonical JSON document, a
//! gnuplot script reproducing the conventional roofline layout, and a text
//! summary table.
//!
//! Output is deterministic for fixed inputs, so documents and plots can be
//! diffed byte-for-byte between runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roofline::{
    BoundKind, KernelMeasurement, PlatformProfile, RooflinePoint, FLAG_TRAFFIC_UNRELIABLE,
    FLAG_WORK_NOT_MEASURABLE,
};

pub const SCHEMA_VERSION: &str = "1";

/// Everything one run produced, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: String,
    pub machine_descriptor: String,
    pub profiles: Vec<PlatformProfile>,
    pub measurements: Vec<KernelMeasurement>,
    pub points: Vec<RooflinePoint>,
    pub warnings: Vec<String>,
    /// Seed of the RNG that filled kernel inputs, for reproduction.
    #[serde(default)]
    pub seed: u64,
}

impl ResultDocument {
    pub fn new(machine_descriptor: String, seed: u64) -> ResultDocument {
        ResultDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            machine_descriptor,
            profiles: Vec::new(),
            measurements: Vec::new(),
            points: Vec::new(),
            warnings: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version.is_empty() {
            return Err(Error::InvalidInput("document lacks a schema version".into()));
        }
        for p in &self.points {
            if !self.profiles.iter().any(|pr| pr.label == p.profile_label) {
                return Err(Error::InvalidInput(format!(
                    "point '{}' references unknown profile '{}'",
                    p.kernel_name, p.profile_label
                )));
            }
            if !self
                .measurements
                .iter()
                .any(|m| m.kernel_name == p.kernel_name)
            {
                return Err(Error::InvalidInput(format!(
                    "point '{}' has no backing measurement",
                    p.kernel_name
                )));
            }
            for (name, v) in [
                ("intensity", p.intensity_flops_per_byte),
                ("attained", p.attained_gflops),
                ("attainable", p.attainable_gflops),
                ("rc", p.rc_percent),
                ("attainable rc", p.attainable_rc_percent),
                ("et", p.et_percent.unwrap_or(0.0)),
            ] {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "point '{}': non-finite {name}",
                        p.kernel_name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical form: keys sorted, floats in shortest round-trip notation,
    /// two-space indent, trailing newline. Byte-stable for golden tests.
    pub fn canonical_json(&self) -> Result<String> {
        self.validate()?;
        // Through Value: serde_json's map is ordered, so keys sort.
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<ResultDocument> {
        let text = std::fs::read_to_string(path)?;
        let doc: ResultDocument = serde_json::from_str(&text)?;
        doc.validate()?;
        Ok(doc)
    }

    fn measurement_for(&self, point: &RooflinePoint) -> Option<&KernelMeasurement> {
        let profile = self.profiles.iter().find(|p| p.label == point.profile_label)?;
        self.measurements.iter().find(|m| {
            m.kernel_name == point.kernel_name && m.scenario.kind == profile.scenario.kind
        })
    }
}

pub fn write_results(doc: &ResultDocument, path: &Path) -> Result<()> {
    doc.write(path)
}

/// Rendering controls. Defaults reproduce the conventional figures,
/// including the traditional misspelling of the y-axis label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotSpec {
    /// The figures this layout reproduces label the y axis "Atteinable
    /// GFLOPS/s"; set to get the corrected spelling instead.
    pub correct_spelling: bool,
    /// Plot performance as percent of peak compute instead of absolute
    /// GFLOP/s (the published figures use the normalized form; its constant
    /// is not recoverable, so both modes exist).
    pub normalized: bool,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec { correct_spelling: false, normalized: false }
    }
}

impl PlotSpec {
    fn y_label(&self) -> &'static str {
        match (self.correct_spelling, self.normalized) {
            (false, false) => "Atteinable GFLOPS/s",
            (true, false) => "Attainable GFLOPS/s",
            (false, true) => "Atteinable GFLOPS/s [% of peak]",
            (true, true) => "Attainable GFLOPS/s [% of peak]",
        }
    }
}

pub const X_LABEL: &str = "Arithmetic Intensity [FLOPS/Byte]";
pub const COMPUTE_BOUND_NOTE: &str = "compute bound (Peak Runtime Compute: 100%)";
pub const LEGEND_RC: &str = "RC - Runtime Compute";
pub const LEGEND_ET: &str = "ET - Execution Time";

/// Shortest exact decimal for a float: deterministic, round-trips.
fn num(x: f64) -> String {
    format!("{x}")
}

/// Renders a self-contained gnuplot script: log-log roof with the two
/// segments meeting at the ridge, one dashed vertical per kernel with a
/// rotated name label and RC/ET annotations, axis ranges covering all
/// points with a decade of margin.
pub fn render_plot(
    profile: &PlatformProfile,
    points: &[RooflinePoint],
    spec: &PlotSpec,
) -> Result<String> {
    if points.is_empty() {
        return Err(Error::InvalidInput("nothing to plot: no points".into()));
    }
    profile.validate()?;
    for p in points {
        if p.profile_label != profile.label {
            return Err(Error::InvalidInput(format!(
                "point '{}' belongs to profile '{}', not '{}'",
                p.kernel_name, p.profile_label, profile.label
            )));
        }
    }
    let pi = profile.peak_flops_gps;
    let beta = profile.peak_bandwidth_gbps;
    let ridge = pi / beta;
    let scale = if spec.normalized { 100.0 / pi } else { 1.0 };

    // One decade of margin past the extremes of the data and the ridge.
    let min_i = points
        .iter()
        .map(|p| p.intensity_flops_per_byte)
        .fold(ridge, f64::min)
        .max(1e-12);
    let max_i = points
        .iter()
        .map(|p| p.intensity_flops_per_byte)
        .fold(ridge, f64::max);
    let min_p = points
        .iter()
        .map(|p| p.attained_gflops * scale)
        .fold(pi * scale, f64::min)
        .max(1e-12);
    let max_p = points
        .iter()
        .map(|p| p.attained_gflops * scale)
        .fold(pi * scale, f64::max);
    let (x0, x1) = (min_i / 10.0, max_i * 10.0);
    let (y0, y1) = (min_p / 10.0, max_p * 10.0);

    let mut s = String::new();
    let title = format!(
        "{}; ({})",
        profile.machine_descriptor,
        profile.scenario.kind.title_text()
    );
    writeln!(s, "# roofline: {}", profile.label).unwrap();
    writeln!(s, "set terminal svg size 900,600 dynamic").unwrap();
    writeln!(s, "set logscale xy").unwrap();
    writeln!(s, "set grid").unwrap();
    writeln!(s, "set key off").unwrap();
    writeln!(s, "set title \"{title}\"").unwrap();
    writeln!(s, "set xlabel \"{X_LABEL}\"").unwrap();
    writeln!(s, "set ylabel \"{}\"", spec.y_label()).unwrap();
    writeln!(s, "set xrange [{}:{}]", num(x0), num(x1)).unwrap();
    writeln!(s, "set yrange [{}:{}]", num(y0), num(y1)).unwrap();
    writeln!(
        s,
        "roof(x) = {} * (x <= {} ? x * {} : {})",
        num(scale),
        num(ridge),
        num(beta),
        num(pi)
    )
    .unwrap();

    let mut label_id = 1;
    let mut label = |s: &mut String, text: &str, rest: &str| {
        writeln!(s, "set label {label_id} \"{text}\" {rest}").unwrap();
        label_id += 1;
    };

    // Roof annotations: the flat segment is only called out when some
    // kernel actually reaches it.
    if points.iter().any(|p| p.bound == BoundKind::ComputeBound) {
        label(
            &mut s,
            COMPUTE_BOUND_NOTE,
            &format!("at first {}, {} left offset 0,0.6", num(ridge), num(pi * scale)),
        );
    }
    label(
        &mut s,
        &format!("Attainable RC: {:.2} %", points[0].attainable_rc_percent),
        &format!("at graph 0.02, graph 0.95 left"),
    );
    label(&mut s, LEGEND_ET, "at graph 0.83, graph 0.06 left");
    label(&mut s, LEGEND_RC, "at graph 0.83, graph 0.03 left");

    for p in points {
        let i = p.intensity_flops_per_byte;
        let top = p.attainable_gflops * scale;
        writeln!(
            s,
            "set arrow from {}, {} to {}, {} nohead dashtype 2",
            num(i),
            num(y0),
            num(i),
            num(top)
        )
        .unwrap();
        label(
            &mut s,
            &format!("{} ({} caches)", p.kernel_name, p.cache_protocol),
            &format!("at {}, {} rotate by 90 left offset character 1,1", num(i), num(y0)),
        );
        label(
            &mut s,
            &format!("RC: {:.2}%", p.rc_percent),
            &format!("at {}, {} left offset character 2,2", num(i), num(p.attained_gflops * scale)),
        );
        if let Some(et) = p.et_percent {
            label(
                &mut s,
                &format!("ET: {et:.2}%"),
                &format!(
                    "at {}, {} left offset character 2,1",
                    num(i),
                    num(p.attained_gflops * scale)
                ),
            );
        }
    }

    writeln!(s, "plot roof(x) with lines lw 2 lc rgb \"black\", \\").unwrap();
    writeln!(s, "     \"-\" using 1:2 with points pt 7 ps 0.8 lc rgb \"red\"").unwrap();
    for p in points {
        writeln!(s, "{} {}", num(p.intensity_flops_per_byte), num(p.attained_gflops * scale))
            .unwrap();
    }
    writeln!(s, "e").unwrap();
    Ok(s)
}

/// Per-kernel, per-scenario table with a from-to delta on repeat rows, plus
/// asterisks on rows whose measurement carries reliability flags.
pub fn summarize(doc: &ResultDocument) -> Result<String> {
    doc.validate()?;
    let mut s = String::new();
    writeln!(
        s,
        "{:<22} {:<14} {:>12} {:>10} {:>12} {:>8} {:>8}  {:<13} {}",
        "kernel", "scenario", "I[FLOP/B]", "GFLOP/s", "roof[GF/s]", "RC%", "ET%", "bound", "dRC"
    )
    .unwrap();
    let mut flagged = false;
    let mut last_rc: BTreeMap<&str, (f64, &str)> = BTreeMap::new();
    for p in &doc.points {
        let profile = doc
            .profiles
            .iter()
            .find(|pr| pr.label == p.profile_label)
            .expect("validated");
        let scenario = profile.scenario.kind.as_str();
        let m = doc.measurement_for(p);
        let star = m.is_some_and(|m| {
            m.warnings
                .iter()
                .any(|w| w == FLAG_TRAFFIC_UNRELIABLE || w == FLAG_WORK_NOT_MEASURABLE)
        });
        flagged |= star;
        let name = if star { format!("{}*", p.kernel_name) } else { p.kernel_name.clone() };
        let et = p.et_percent.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let drc = match last_rc.get(p.kernel_name.as_str()) {
            Some((prev, prev_scen)) => format!(
                "from {prev:.2}% ({prev_scen}) to {:.2}% ({scenario})",
                p.rc_percent
            ),
            None => String::new(),
        };
        writeln!(
            s,
            "{:<22} {:<14} {:>12.4} {:>10.2} {:>12.2} {:>8.2} {:>8}  {:<13} {}",
            name,
            scenario,
            p.intensity_flops_per_byte,
            p.attained_gflops,
            p.attainable_gflops,
            p.rc_percent,
            et,
            p.bound.to_string(),
            drc
        )
        .unwrap();
        last_rc.insert(p.kernel_name.as_str(), (p.rc_percent, scenario));
    }
    if flagged {
        writeln!(s, "* measurement carries a reliability flag (see document warnings)").unwrap();
    }
    Ok(s)
}
