//! The four stages behind the subcommands: probe (read-only machine
//! report), bench (peak compute + bandwidth per scenario), measure (kernel
//! suite against stored profiles), report (plots + summary table).
//!
//! Stages communicate through `<out>/results.json`. Each writing stage
//! persists the document before returning, so earlier artifacts survive a
//! later stage's failure. Recoverable problems are returned as stage-error
//! strings; the process exits non-zero iff any stage recorded one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use roofline_core::codegen::{
    detect_isa, mock_peak_compute, run_peak_compute, ComputeBenchConfig,
};
use roofline_core::harness::{CacheProtocol, KernelSpec, RunPlan, run_suite};
use roofline_core::membench::{peak_bandwidth, two_socket_bandwidth, BandwidthBackend};
use roofline_core::mock::mock_compute_config;
use roofline_core::pmu::{CounterBackend, CounterMask, HardwareCounters};
use roofline_core::report::{
    render_plot, summarize, write_results, PlotSpec, ResultDocument,
};
use roofline_core::roofline::{
    make_point, relative_execution_time, KernelMeasurement, PlatformProfile, RooflinePoint,
};
use roofline_core::topology::{MachineTopology, Scenario, ScenarioKind};
use roofline_core::{Error, Result};

use crate::config::{Cli, Command, Config};

pub const RESULTS_FILE: &str = "results.json";

/// Stage errors: recorded, printed, and turned into a non-zero exit, but
/// they never abort sibling work.
pub type StageErrors = Vec<String>;

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<StageErrors> {
    let cfg = Config::resolve(cli.command.args())?;
    match &cli.command {
        Command::Probe(_) => {
            cmd_probe(&cfg, out)?;
            Ok(Vec::new())
        }
        Command::Bench(_) => Pipeline::new(cfg)?.cmd_bench(out),
        Command::Measure(_) => Pipeline::new(cfg)?.cmd_measure(out),
        Command::Report(_) => Pipeline::new(cfg)?.cmd_report(out),
        Command::Full(_) => cmd_full(cfg, out),
    }
}

// ---------------------------------------------------------------------------
// Host introspection (all read-only)
// ---------------------------------------------------------------------------

fn read_trimmed(path: &str) -> Option<String> {
    std::fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

/// CPU model string, the document's machine identifier.
pub fn machine_descriptor() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines().find_map(|line| {
                let (key, value) = line.split_once(':')?;
                (key.trim() == "model name").then(|| value.trim().to_string())
            })
        })
        .unwrap_or_else(|| "unknown x86_64 cpu".into())
}

/// Some(true) when frequency boosting is active; None when no control is
/// visible (VMs, containers).
pub fn turbo_enabled() -> Option<bool> {
    if let Some(v) = read_trimmed("/sys/devices/system/cpu/intel_pstate/no_turbo") {
        return Some(v == "0");
    }
    if let Some(v) = read_trimmed("/sys/devices/system/cpu/cpufreq/boost") {
        return Some(v == "1");
    }
    None
}

pub fn perf_paranoid() -> Option<i64> {
    read_trimmed("/proc/sys/kernel/perf_event_paranoid")?.parse().ok()
}

fn describe_mask(mask: CounterMask) -> String {
    let fp = if mask.fp_complete() {
        "fp events complete"
    } else if mask.scalar_single || mask.packed_128 || mask.packed_256 || mask.packed_512 {
        "fp events partial (work not measurable)"
    } else {
        "fp events unavailable"
    };
    let imc = if mask.imc { "imc events available" } else { "imc events unavailable" };
    format!("{fp}; {imc}")
}

fn print_topology(topo: &MachineTopology, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "cpus: {} logical, {} sockets", topo.logical_cpus(), topo.sockets())?;
    let nodes = topo.node_ids();
    writeln!(out, "numa nodes: {}", nodes.len())?;
    for node in nodes {
        writeln!(out, "  node {node}: cpus {:?}", topo.cpus_of_node(node))?;
    }
    writeln!(out, "llc: {} bytes per socket", topo.llc_bytes)?;
    Ok(())
}

/// Machine report. Never fatal: every probe failure becomes a printed
/// warning, and nothing is written anywhere.
pub fn cmd_probe(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    match &cfg.script {
        Some(script) => {
            writeln!(out, "Mock backend (scripted counters and timings)")?;
            writeln!(out, "machine: {}", script.machine_descriptor)?;
            print_topology(&script.machine()?, out)?;
            writeln!(out, "isa: {}", script.isa)?;
            writeln!(out, "counters: scripted; {}", describe_mask(script.counter_mask))?;
        }
        None => {
            writeln!(out, "machine: {}", machine_descriptor())?;
            match MachineTopology::discover() {
                Ok(topo) => {
                    for w in &topo.warnings {
                        writeln!(out, "warning: {w}")?;
                    }
                    print_topology(&topo, out)?;
                }
                Err(e) => writeln!(out, "warning: topology discovery failed: {e}")?,
            }
            match detect_isa() {
                Ok(isa) => writeln!(out, "isa: {isa}")?,
                Err(e) => writeln!(out, "warning: {e}")?,
            }
            match turbo_enabled() {
                Some(true) => writeln!(
                    out,
                    "warning: frequency boost is enabled; peaks will drift with \
                     thermal state, prefer benching with it disabled"
                )?,
                Some(false) => writeln!(out, "frequency boost: disabled")?,
                None => writeln!(out, "frequency boost: no control visible")?,
            }
            if let Some(v) = perf_paranoid() {
                writeln!(out, "perf_event_paranoid: {v}")?;
            }
            match HardwareCounters::open() {
                Ok(hw) => {
                    writeln!(out, "counters: {}", describe_mask(hw.mask))?;
                    for note in &hw.notes {
                        writeln!(out, "warning: {note}")?;
                    }
                }
                Err(e) => writeln!(out, "warning: counters unavailable: {e}")?,
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Writing stages
// ---------------------------------------------------------------------------

pub struct Pipeline {
    cfg: Config,
    topo: MachineTopology,
}

impl Pipeline {
    pub fn new(cfg: Config) -> Result<Pipeline> {
        let topo = match &cfg.script {
            Some(script) => script.machine()?,
            None => MachineTopology::discover()?,
        };
        Ok(Pipeline { cfg, topo })
    }

    pub fn results_path(&self) -> PathBuf {
        self.cfg.out_dir.join(RESULTS_FILE)
    }

    fn descriptor(&self) -> String {
        match &self.cfg.script {
            Some(script) => script.machine_descriptor.clone(),
            None => machine_descriptor(),
        }
    }

    fn scenario_for(&self, kind: ScenarioKind) -> Result<Scenario> {
        let mut scenario = Scenario::for_kind(kind, &self.topo)?;
        if self.cfg.one_thread_per_core {
            scenario.cpu_set = self.topo.one_cpu_per_core(&scenario.cpu_set);
        }
        Ok(scenario)
    }

    fn load_or_new_document(&self) -> Result<ResultDocument> {
        let path = self.results_path();
        if path.exists() {
            ResultDocument::read(&path)
        } else {
            Ok(ResultDocument::new(self.descriptor(), self.cfg.seed))
        }
    }

    fn persist(&self, doc: &ResultDocument, out: &mut dyn Write) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let path = self.results_path();
        write_results(doc, &path)?;
        writeln!(out, "wrote {}", path.display())?;
        Ok(())
    }

    /// Peak compute and peak bandwidth per requested scenario, stored as
    /// profiles. A scenario the machine cannot host is a stage error; the
    /// others still run and the document is persisted regardless.
    pub fn cmd_bench(&self, out: &mut dyn Write) -> Result<StageErrors> {
        let mut errors = Vec::new();
        let mut doc = self.load_or_new_document()?;
        for &kind in &self.cfg.scenarios {
            if let Err(e) = self.bench_scenario(kind, &mut doc, out) {
                errors.push(format!("bench {}: {e}", kind.as_str()));
            }
        }
        if self.cfg.script.is_none() && turbo_enabled() == Some(true) {
            let w = "frequency boost was enabled while benching peaks".to_string();
            if !doc.warnings.contains(&w) {
                doc.warnings.push(w);
            }
        }
        self.persist(&doc, out)?;
        Ok(errors)
    }

    fn bench_scenario(
        &self,
        kind: ScenarioKind,
        doc: &mut ResultDocument,
        out: &mut dyn Write,
    ) -> Result<()> {
        let scenario = self.scenario_for(kind)?;
        let (pi, beta, warnings) = match &self.cfg.script {
            Some(script) => {
                let compute = mock_peak_compute(
                    &scenario,
                    script.isa,
                    &mock_compute_config(),
                    script.compute_seconds_per_call,
                )?;
                let backend = BandwidthBackend::Mock(script.bandwidth.clone());
                let (beta, warnings) = self.bandwidth(&scenario, &backend)?;
                (compute.gflops, beta, warnings)
            }
            None => {
                let compute = run_peak_compute(&scenario, &ComputeBenchConfig::default())?;
                let (beta, warnings) =
                    self.bandwidth(&scenario, &BandwidthBackend::Hardware)?;
                (compute.gflops, beta, warnings)
            }
        };
        let label = kind.as_str().to_string();
        let profile = PlatformProfile {
            scenario,
            peak_flops_gps: pi,
            peak_bandwidth_gbps: beta,
            label: label.clone(),
            machine_descriptor: self.descriptor(),
        };
        profile.validate()?;
        // Re-benching a scenario replaces its profile and its old warnings.
        let prefix = format!("bench {label}: ");
        doc.profiles.retain(|p| p.label != label);
        doc.warnings.retain(|w| !w.starts_with(&prefix));
        doc.profiles.push(profile);
        for w in warnings {
            doc.warnings.push(format!("{prefix}{w}"));
        }
        writeln!(
            out,
            "{label}: pi {pi} GFLOP/s, beta {beta} GB/s, ridge {} FLOP/B",
            pi / beta
        )?;
        Ok(())
    }

    fn bandwidth(
        &self,
        scenario: &Scenario,
        backend: &BandwidthBackend,
    ) -> Result<(f64, Vec<String>)> {
        if scenario.kind == ScenarioKind::TwoSockets {
            let peak =
                two_socket_bandwidth(scenario, &self.topo, self.cfg.buffer_bytes, backend)?;
            let warnings = peak.nodes.iter().flat_map(|n| n.warnings.clone()).collect();
            Ok((peak.total_gbps, warnings))
        } else {
            let peak = peak_bandwidth(scenario, self.cfg.buffer_bytes, backend)?;
            Ok((peak.gbps, peak.warnings))
        }
    }

    fn counter_backend(&self) -> Result<CounterBackend> {
        match &self.cfg.script {
            Some(script) => Ok(CounterBackend::Mock(script.counters())),
            None => Ok(CounterBackend::Hardware(HardwareCounters::open()?)),
        }
    }

    /// Runs the kernel suite against the stored profiles and derives the
    /// roofline points. A scenario without a profile, a failing suite cell,
    /// and an ET group missing its baseline are stage errors.
    pub fn cmd_measure(&self, out: &mut dyn Write) -> Result<StageErrors> {
        let path = self.results_path();
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "no profile for scenario '{}': {} does not exist (run bench first)",
                self.cfg.scenarios[0].as_str(),
                path.display()
            )));
        }
        let mut doc = ResultDocument::read(&path)?;
        let mut errors = Vec::new();

        let mut plans = Vec::new();
        for &kind in &self.cfg.scenarios {
            match doc.profiles.iter().find(|p| p.label == kind.as_str()) {
                Some(profile) => plans.push(RunPlan {
                    scenario: profile.scenario.clone(),
                    cache: CacheProtocol::for_kind(self.cfg.cache, self.topo.llc_bytes),
                    repetitions: self.cfg.repetitions,
                    kernel_name: String::new(), // run_suite fills per kernel
                    baseline_subtraction: self.cfg.idle_baseline,
                }),
                None => errors.push(format!(
                    "no profile for scenario '{}' (run bench first)",
                    kind.as_str()
                )),
            }
        }
        if plans.is_empty() {
            return Ok(errors);
        }

        let specs: Vec<KernelSpec> = self
            .cfg
            .kernels
            .iter()
            .map(|name| {
                let mut spec = KernelSpec::named(name);
                spec.isa = self.cfg.pinned_isa();
                spec
            })
            .collect();
        let mut backend = self.counter_backend()?;
        let outcome = run_suite(&specs, &plans, &mut backend, self.cfg.seed)?;

        for f in &outcome.failures {
            errors.push(format!(
                "measure {} on {} ({} caches): {}",
                f.kernel_name,
                f.scenario,
                f.cache.as_str(),
                f.error
            ));
        }
        for m in outcome.measurements {
            writeln!(
                out,
                "measured {} on {} ({} caches): W={} flop, Q={} bytes, R={} s",
                m.kernel_name,
                m.scenario.kind.as_str(),
                m.cache_protocol.as_str(),
                m.work_flops,
                m.traffic_bytes,
                m.runtime_seconds
            )?;
            // Same cell measured again replaces the old record.
            doc.measurements.retain(|old| {
                !(old.kernel_name == m.kernel_name
                    && old.scenario.kind == m.scenario.kind
                    && old.cache_protocol == m.cache_protocol)
            });
            doc.measurements.push(m);
        }

        self.rebuild_points(&mut doc, &mut errors);
        doc.seed = self.cfg.seed;
        self.persist(&doc, out)?;
        Ok(errors)
    }

    /// Derives every roofline point from the stored measurements. ET
    /// percentages exist only when a baseline kernel is configured, computed
    /// within each (scenario, cache protocol) group.
    fn rebuild_points(&self, doc: &mut ResultDocument, errors: &mut Vec<String>) {
        let mut et: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
        if let Some(baseline) = &self.cfg.et_baseline {
            let mut groups: BTreeMap<(String, String), Vec<KernelMeasurement>> =
                BTreeMap::new();
            for m in &doc.measurements {
                groups
                    .entry((
                        m.scenario.kind.as_str().to_string(),
                        m.cache_protocol.as_str().to_string(),
                    ))
                    .or_default()
                    .push(m.clone());
            }
            for (key, group) in groups {
                match relative_execution_time(&group, baseline) {
                    Ok(map) => {
                        et.insert(key, map);
                    }
                    Err(e) => errors.push(format!(
                        "ET on {} ({} caches): {e}",
                        key.0, key.1
                    )),
                }
            }
        }

        let mut points: Vec<RooflinePoint> = Vec::new();
        for m in &doc.measurements {
            let label = m.scenario.kind.as_str();
            let Some(profile) = doc.profiles.iter().find(|p| p.label == label) else {
                errors.push(format!(
                    "point {}: no profile '{label}' in the document",
                    m.kernel_name
                ));
                continue;
            };
            let et_percent = et
                .get(&(label.to_string(), m.cache_protocol.as_str().to_string()))
                .and_then(|g| g.get(&m.kernel_name))
                .copied();
            match make_point(profile, m, et_percent) {
                Ok(p) => points.push(p),
                Err(e) => errors.push(format!("point {} on {label}: {e}", m.kernel_name)),
            }
        }
        doc.points = points;
    }

    /// Renders one gnuplot script per profile that has points, plus the
    /// summary table (written and echoed).
    pub fn cmd_report(&self, out: &mut dyn Write) -> Result<StageErrors> {
        let path = self.results_path();
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "nothing to report: {} does not exist (run bench and measure first)",
                path.display()
            )));
        }
        let doc = ResultDocument::read(&path)?;
        if doc.profiles.is_empty() {
            return Err(Error::InvalidInput(
                "nothing to report: document has no profiles".into(),
            ));
        }
        let mut errors = Vec::new();
        let spec = PlotSpec {
            correct_spelling: self.cfg.correct_spelling,
            normalized: self.cfg.normalized,
        };
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        for profile in &doc.profiles {
            let points: Vec<RooflinePoint> = doc
                .points
                .iter()
                .filter(|p| p.profile_label == profile.label)
                .cloned()
                .collect();
            if points.is_empty() {
                writeln!(out, "{}: no points, skipping plot", profile.label)?;
                continue;
            }
            match render_plot(profile, &points, &spec) {
                Ok(script) => {
                    let plot_path =
                        self.cfg.out_dir.join(format!("roofline-{}.gnuplot", profile.label));
                    std::fs::write(&plot_path, script)?;
                    writeln!(out, "wrote {}", plot_path.display())?;
                }
                Err(e) => errors.push(format!("plot {}: {e}", profile.label)),
            }
        }
        let summary = summarize(&doc)?;
        let summary_path = self.cfg.out_dir.join("summary.txt");
        std::fs::write(&summary_path, &summary)?;
        writeln!(out, "wrote {}", summary_path.display())?;
        write!(out, "{summary}")?;
        Ok(errors)
    }
}

/// probe, bench, measure, report in sequence. A stage's hard failure is
/// recorded and the remaining stages still run, so everything that could be
/// produced is on disk afterwards.
pub fn cmd_full(cfg: Config, out: &mut dyn Write) -> Result<StageErrors> {
    let mut errors = Vec::new();
    cmd_probe(&cfg, out)?;
    let pipeline = Pipeline::new(cfg)?;
    match pipeline.cmd_bench(out) {
        Ok(stage) => errors.extend(stage),
        Err(e) => errors.push(format!("bench: {e}")),
    }
    match pipeline.cmd_measure(out) {
        Ok(stage) => errors.extend(stage),
        Err(e) => errors.push(format!("measure: {e}")),
    }
    match pipeline.cmd_report(out) {
        Ok(stage) => errors.extend(stage),
        Err(e) => errors.push(format!("report: {e}")),
    }
    Ok(errors)
}
