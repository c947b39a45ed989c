//! End-to-end runs of the installed binary against the scripted backend,
//! plus the error paths the stages promise.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn roofline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roofline"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The golden invocation: two scenarios, two kernels, scripted machine.
fn full_run(out_dir: &Path) -> Output {
    let script = fixture("mock_xeon.json");
    roofline(&[
        "full",
        "--backend",
        "mock",
        "--mock-script",
        script.to_str().unwrap(),
        "--scenario",
        "single-thread",
        "--scenario",
        "single-socket",
        "--kernels",
        "sum_reduction,fma_dense",
        "--cache",
        "cold",
        "--reps",
        "3",
        "--et-baseline",
        "sum_reduction",
        "--seed",
        "42",
        "--out",
        out_dir.to_str().unwrap(),
    ])
}

#[test]
fn mock_full_run_matches_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let out = full_run(dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    for name in [
        "results.json",
        "roofline-single-thread.gnuplot",
        "roofline-single-socket.gnuplot",
        "summary.txt",
    ] {
        let produced = std::fs::read(dir.path().join(name)).unwrap();
        let expected = std::fs::read(golden(name)).unwrap();
        assert_eq!(
            produced,
            expected,
            "{name} drifted from the golden copy:\n--- produced ---\n{}",
            String::from_utf8_lossy(&produced)
        );
    }
}

/// Peaks scale with the scenario: one thread < one socket < both sockets,
/// and the two-socket bandwidth is exactly the sum over the nodes.
#[test]
fn mock_bench_orders_scenario_peaks() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("mock_xeon.json");
    let out = roofline(&[
        "bench",
        "--backend",
        "mock",
        "--mock-script",
        script.to_str().unwrap(),
        "--scenario",
        "single-thread",
        "--scenario",
        "single-socket",
        "--scenario",
        "two-sockets",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap())
            .unwrap();
    let profiles = doc["profiles"].as_array().unwrap();
    let peak = |label: &str| {
        let p = profiles.iter().find(|p| p["label"] == label).unwrap();
        (
            p["peak_flops_gps"].as_f64().unwrap(),
            p["peak_bandwidth_gbps"].as_f64().unwrap(),
        )
    };
    let (pi_thread, beta_thread) = peak("single-thread");
    let (pi_socket, beta_socket) = peak("single-socket");
    let (pi_both, beta_both) = peak("two-sockets");
    assert_eq!(pi_thread, 4.096);
    assert_eq!(pi_socket, 8.192);
    assert_eq!(pi_both, 16.384);
    assert!(pi_thread < pi_socket && pi_socket < pi_both);
    // no scripted node skew: both sockets contribute the single-node rate
    assert_eq!(beta_thread, beta_socket);
    assert_eq!(beta_both, 2.0 * beta_socket);
}

#[test]
fn mock_full_run_is_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let out_a = full_run(dir_a.path());
    let out_b = full_run(dir_b.path());
    assert!(out_a.status.success() && out_b.status.success());
    // stdout differs only in the output paths it echoes
    let norm = |out: &Output, dir: &Path| {
        String::from_utf8_lossy(&out.stdout).replace(dir.to_str().unwrap(), "<out>")
    };
    assert_eq!(
        norm(&out_a, dir_a.path()),
        norm(&out_b, dir_b.path()),
        "stdout must not vary across runs"
    );
    for name in [
        "results.json",
        "roofline-single-thread.gnuplot",
        "roofline-single-socket.gnuplot",
        "summary.txt",
    ] {
        assert_eq!(
            std::fs::read(dir_a.path().join(name)).unwrap(),
            std::fs::read(dir_b.path().join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn plot_carries_conventional_annotations() {
    let script = std::fs::read_to_string(golden("roofline-single-thread.gnuplot")).unwrap();
    assert!(script.contains("compute bound (Peak Runtime Compute: 100%)"));
    assert!(script.contains("RC - Runtime Compute"));
    assert!(script.contains("ET - Execution Time"));
    assert!(script.contains("Arithmetic Intensity [FLOPS/Byte]"));
    assert!(script.contains("Atteinable GFLOPS/s"));
}

#[test]
fn probe_prints_mock_banner_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never-created");
    let script = fixture("mock_xeon.json");
    let out = roofline(&[
        "probe",
        "--backend",
        "mock",
        "--mock-script",
        script.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("Mock backend"), "{text}");
    assert!(text.contains("Scripted Xeon 2S @ 2.00GHz"), "{text}");
    assert!(!out_dir.exists(), "probe must not create the output directory");
}

#[test]
fn measure_without_bench_names_the_missing_profile() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("mock_xeon.json");
    let out = roofline(&[
        "measure",
        "--backend",
        "mock",
        "--mock-script",
        script.to_str().unwrap(),
        "--out",
        dir.path().join("empty").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("no profile for scenario 'single-thread'"), "{err}");
}

#[test]
fn measure_against_missing_scenario_profile_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("mock_xeon.json");
    let script = script.to_str().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    // bench only single-thread, then measure single-socket
    let out = roofline(&[
        "bench", "--backend", "mock", "--mock-script", script, "--scenario",
        "single-thread", "--out", &out_dir,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = roofline(&[
        "measure", "--backend", "mock", "--mock-script", script, "--scenario",
        "single-socket", "--kernels", "sum_reduction", "--reps", "3", "--out", &out_dir,
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("no profile for scenario 'single-socket'"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn et_baseline_outside_kernel_list_is_rejected_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("untouched");
    let script = fixture("mock_xeon.json");
    let out = roofline(&[
        "full",
        "--backend",
        "mock",
        "--mock-script",
        script.to_str().unwrap(),
        "--kernels",
        "sum_reduction,triad",
        "--et-baseline",
        "gelu_elementwise",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("ET baseline 'gelu_elementwise'"), "{err}");
    assert!(err.contains("sum_reduction, triad"), "must name valid kernels: {err}");
    assert!(!out_dir.exists(), "invalid config must leave no side effects");
}

#[test]
fn two_sockets_on_single_node_machine_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let script_path = dir.path().join("one-node.json");
    let mut script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("mock_xeon.json")).unwrap())
            .unwrap();
    script["topology"]["sockets"] = 1.into();
    std::fs::write(&script_path, serde_json::to_string_pretty(&script).unwrap()).unwrap();

    let out = roofline(&[
        "bench",
        "--backend",
        "mock",
        "--mock-script",
        script_path.to_str().unwrap(),
        "--scenario",
        "two-sockets",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("bench two-sockets"), "{err}");
    assert!(err.contains("two"), "explains the shortfall: {err}");
}

#[test]
fn unknown_kernel_is_rejected_naming_the_valid_set() {
    let out = roofline(&["measure", "--kernels", "fft"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("unknown kernel 'fft'"), "{err}");
    assert!(err.contains("sum_reduction"), "{err}");
}

#[test]
fn config_file_drives_a_full_run_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_path = dir.path().join("cfg.json");
    let script = fixture("mock_xeon.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "backend": "mock",
            "mock_script": script.to_str().unwrap(),
            "scenario": ["single-thread", "single-socket"],
            "kernels": ["sum_reduction", "fma_dense"],
            "cache": "cold",
            "reps": 3,
            "et_baseline": "sum_reduction",
            "seed": 42,
            "out": out_a.to_str().unwrap(),
        })
        .to_string(),
    )
    .unwrap();

    // config-file-only run equals the all-flags golden run
    let out = roofline(&["full", "--config", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(out_a.join("results.json")).unwrap(),
        std::fs::read(golden("results.json")).unwrap(),
        "config-file run must equal the flag run"
    );

    // a flag redirects the output away from the file's value
    let out = roofline(&[
        "full",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_b.join("results.json").exists(), "--out must override the file");
}

#[test]
fn bench_artifacts_survive_a_failing_measure_stage() {
    // Script with bandwidth/compute intact but zero counter samples: bench
    // succeeds, measure exhausts the script immediately.
    let dir = tempfile::tempdir().unwrap();
    let script_path = dir.path().join("starved.json");
    let mut script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("mock_xeon.json")).unwrap())
            .unwrap();
    script["counter_samples"] = serde_json::json!([]);
    script["kernel_runtimes_seconds"] = serde_json::json!([]);
    std::fs::write(&script_path, serde_json::to_string_pretty(&script).unwrap()).unwrap();

    let out_dir = dir.path().join("out");
    let out = roofline(&[
        "full",
        "--backend",
        "mock",
        "--mock-script",
        script_path.to_str().unwrap(),
        "--kernels",
        "sum_reduction",
        "--reps",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "exhausted script must fail the run");
    assert!(stderr(&out).contains("exhausted"), "{}", stderr(&out));

    // bench output persisted despite the later failure
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    assert_eq!(doc["profiles"].as_array().unwrap().len(), 1);
    assert_eq!(doc["profiles"][0]["peak_flops_gps"], serde_json::json!(4.096));
    // summary still rendered (header-only table)
    assert!(out_dir.join("summary.txt").exists());
}

#[test]
fn warnings_do_not_change_the_exit_code() {
    // nt-fill strictly fastest => single-thread bench records a warning but
    // stays exit 0.
    let dir = tempfile::tempdir().unwrap();
    let script_path = dir.path().join("nt-wins.json");
    let mut script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("mock_xeon.json")).unwrap())
            .unwrap();
    script["bandwidth"]["lib_copy_pass_seconds"] = serde_json::json!(0.25);
    std::fs::write(&script_path, serde_json::to_string_pretty(&script).unwrap()).unwrap();

    let out_dir = dir.path().join("out");
    let out = roofline(&[
        "bench",
        "--backend",
        "mock",
        "--mock-script",
        script_path.to_str().unwrap(),
        "--scenario",
        "single-thread",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    let warnings = doc["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.as_str().unwrap().contains("nt-fill")),
        "{warnings:?}"
    );
}
