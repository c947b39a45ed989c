//! Configuration resolution: defaults, then the JSON config file, then
//! command-line flags, strongest last. Every flag has an identically named
//! config-file key (dashes become underscores), and everything is validated
//! before any stage touches the filesystem.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use roofline_core::codegen::VectorIsa;
use roofline_core::harness::{CacheKind, DEFAULT_REPETITIONS};
use roofline_core::kernels::KERNEL_NAMES;
use roofline_core::membench::DEFAULT_BUFFER_BYTES;
use roofline_core::mock::MockScript;
use roofline_core::topology::ScenarioKind;
use roofline_core::{Error, Result};

pub const DEFAULT_OUT_DIR: &str = "roofline-out";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "roofline",
    about = "Builds roofline models: benchmarks machine peaks, measures kernels \
             through hardware counters, renders plots."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report topology, vector ISA, turbo state and counter availability.
    Probe(CommonArgs),
    /// Benchmark peak compute and peak bandwidth for each scenario.
    Bench(CommonArgs),
    /// Measure kernels against previously benchmarked profiles.
    Measure(CommonArgs),
    /// Render plot scripts and a summary table from the result document.
    Report(CommonArgs),
    /// Probe, bench, measure and report in one run.
    Full(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Probe(a)
            | Command::Bench(a)
            | Command::Measure(a)
            | Command::Report(a)
            | Command::Full(a) => a,
        }
    }
}

/// Raw flags. Everything is optional here; [`Config::resolve`] layers these
/// over the config file and the defaults.
#[derive(Debug, Default, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file; flags given here override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Resource scenario (single-thread, single-socket, two-sockets); repeatable.
    #[arg(long = "scenario", value_name = "KIND")]
    pub scenario: Vec<String>,
    /// Cache protocol before each timed repetition (cold, warm).
    #[arg(long, value_name = "PROTOCOL")]
    pub cache: Option<String>,
    /// Timed repetitions per kernel.
    #[arg(long = "reps", value_name = "N")]
    pub reps: Option<u32>,
    /// Bandwidth-probe buffer size in bytes.
    #[arg(long = "buffer-bytes", value_name = "N")]
    pub buffer_bytes: Option<u64>,
    /// Counter and timing source (hw, mock).
    #[arg(long, value_name = "KIND")]
    pub backend: Option<String>,
    /// Script file for the mock backend.
    #[arg(long = "mock-script", value_name = "PATH")]
    pub mock_script: Option<PathBuf>,
    /// Output directory for the result document, plots and summary.
    #[arg(long = "out", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Kernels to measure, comma-separated; repeatable.
    #[arg(long = "kernels", value_name = "LIST", value_delimiter = ',')]
    pub kernels: Vec<String>,
    /// Kernel whose runtime is the 100% mark for ET percentages.
    #[arg(long = "et-baseline", value_name = "NAME")]
    pub et_baseline: Option<String>,
    /// Seed for kernel input data (recorded in the result document).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Subtract an idle-interval traffic baseline from each measurement.
    #[arg(long = "idle-baseline")]
    pub idle_baseline: bool,
    /// Bench with one CPU per physical core instead of every logical CPU.
    #[arg(long = "one-thread-per-core")]
    pub one_thread_per_core: bool,
    /// Use the conventional spelling for the plot's y-axis label.
    #[arg(long = "correct-spelling")]
    pub correct_spelling: bool,
    /// Plot performance as a percentage of peak instead of GFLOP/s.
    #[arg(long)]
    pub normalized: bool,
}

/// Config-file shape: the flags, dashes as underscores. Unknown keys are
/// rejected so typos cannot silently fall back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: Option<Vec<String>>,
    cache: Option<String>,
    reps: Option<u32>,
    buffer_bytes: Option<u64>,
    backend: Option<String>,
    mock_script: Option<PathBuf>,
    out: Option<PathBuf>,
    kernels: Option<Vec<String>>,
    et_baseline: Option<String>,
    seed: Option<u64>,
    idle_baseline: Option<bool>,
    one_thread_per_core: Option<bool>,
    correct_spelling: Option<bool>,
    normalized: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Hw,
    Mock,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<BackendKind> {
        match s {
            "hw" => Ok(BackendKind::Hw),
            "mock" => Ok(BackendKind::Mock),
            other => Err(Error::InvalidInput(format!(
                "unknown backend '{other}' (expected hw or mock)"
            ))),
        }
    }
}

/// Fully resolved and validated settings for one invocation.
#[derive(Debug)]
pub struct Config {
    pub scenarios: Vec<ScenarioKind>,
    pub cache: CacheKind,
    pub repetitions: u32,
    pub buffer_bytes: usize,
    pub backend: BackendKind,
    /// Loaded eagerly so a broken script fails before any side effects.
    pub script: Option<MockScript>,
    pub out_dir: PathBuf,
    pub kernels: Vec<String>,
    pub et_baseline: Option<String>,
    pub seed: u64,
    pub idle_baseline: bool,
    pub one_thread_per_core: bool,
    pub correct_spelling: bool,
    pub normalized: bool,
}

impl Config {
    /// Defaults, overridden by the config file, overridden by flags. Boolean
    /// flags only switch features on; use the file to set them durably.
    pub fn resolve(args: &CommonArgs) -> Result<Config> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str::<FileConfig>(&text).map_err(|e| {
                    Error::InvalidInput(format!("malformed config {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };

        let scenario_names: Vec<String> = if !args.scenario.is_empty() {
            args.scenario.clone()
        } else {
            file.scenario.unwrap_or_else(|| vec!["single-thread".into()])
        };
        let mut scenarios = Vec::new();
        for name in &scenario_names {
            let kind: ScenarioKind = name.parse()?;
            if !scenarios.contains(&kind) {
                scenarios.push(kind);
            }
        }
        if scenarios.is_empty() {
            return Err(Error::InvalidInput("no scenarios selected".into()));
        }

        let cache: CacheKind = args
            .cache
            .clone()
            .or(file.cache)
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(CacheKind::Cold);
        let repetitions = args.reps.or(file.reps).unwrap_or(DEFAULT_REPETITIONS);
        let buffer_bytes = args
            .buffer_bytes
            .or(file.buffer_bytes)
            .map(|b| b as usize)
            .unwrap_or(DEFAULT_BUFFER_BYTES);
        let backend: BackendKind = args
            .backend
            .clone()
            .or(file.backend)
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(BackendKind::Hw);
        let mock_script = args.mock_script.clone().or(file.mock_script);
        let out_dir = args
            .out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        let kernels: Vec<String> = if !args.kernels.is_empty() {
            args.kernels.clone()
        } else {
            file.kernels
                .unwrap_or_else(|| KERNEL_NAMES.iter().map(|n| n.to_string()).collect())
        };
        let et_baseline = args.et_baseline.clone().or(file.et_baseline);
        let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);

        let script = match (backend, &mock_script) {
            (BackendKind::Mock, Some(path)) => Some(MockScript::load(path)?),
            (BackendKind::Mock, None) => {
                return Err(Error::InvalidInput(
                    "the mock backend needs --mock-script PATH".into(),
                ))
            }
            (BackendKind::Hw, Some(_)) => {
                return Err(Error::InvalidInput(
                    "--mock-script is only meaningful with --backend mock".into(),
                ))
            }
            (BackendKind::Hw, None) => None,
        };

        let cfg = Config {
            scenarios,
            cache,
            repetitions,
            buffer_bytes,
            backend,
            script,
            out_dir,
            kernels,
            et_baseline,
            seed,
            idle_baseline: args.idle_baseline || file.idle_baseline.unwrap_or(false),
            one_thread_per_core: args.one_thread_per_core
                || file.one_thread_per_core.unwrap_or(false),
            correct_spelling: args.correct_spelling || file.correct_spelling.unwrap_or(false),
            normalized: args.normalized || file.normalized.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::InvalidInput("no kernels selected".into()));
        }
        for name in &self.kernels {
            if !KERNEL_NAMES.contains(&name.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "unknown kernel '{name}' (available: {})",
                    KERNEL_NAMES.join(", ")
                )));
            }
        }
        if let Some(baseline) = &self.et_baseline {
            if !self.kernels.contains(baseline) {
                return Err(Error::InvalidInput(format!(
                    "ET baseline '{baseline}' is not among the measured kernels \
                     (valid: {})",
                    self.kernels.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// ISA the fma_dense kernel should assume: the scripted machine's tier
    /// under mock, host detection otherwise.
    pub fn pinned_isa(&self) -> Option<VectorIsa> {
        self.script.as_ref().map(|s| s.isa)
    }
}
