use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qkdsync::analytics::{pd_full, DimensionlessParams};
use serde_json::Value;

fn qkdsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdsync"))
        .args(args)
        .current_dir(workspace_root())
        .output()
        .expect("binary runs")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn csv_rows(out: &Output) -> Vec<csv::StringRecord> {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    reader.records().map(|r| r.unwrap()).collect()
}

fn field(row: &csv::StringRecord, i: usize) -> f64 {
    row[i].parse().unwrap()
}

#[test]
fn budget_single_length() {
    let rows = csv_rows(&qkdsync(&["budget", "--length-max", "0"]));
    assert_eq!(rows.len(), 1);
    assert_eq!(field(&rows[0], 0), 0.0);
}

#[test]
fn budget_sweep_decreases_and_crosses_unity_near_50_km() {
    let rows = csv_rows(&qkdsync(&[
        "budget",
        "--length-max",
        "100000",
        "--step",
        "1000",
    ]));
    assert_eq!(rows.len(), 101);
    for stage in 1..=3 {
        for pair in rows.windows(2) {
            assert!(field(&pair[1], stage) < field(&pair[0], stage));
        }
    }
    let at_50 = &rows[50];
    assert_eq!(field(at_50, 0), 50_000.0);
    let stage3 = field(at_50, 3);
    assert!((0.9..1.0).contains(&stage3), "{stage3}");
    assert_eq!(&at_50[6], "single_photon");
    assert!(field(&rows[49], 3) > 1.0);
}

#[test]
fn budget_reports_bad_config_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "station_loss_db = 47.7\nextra_db = \"two\"\n").unwrap();
    let out = qkdsync(&["budget", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn budget_reads_example_config() {
    let rows = csv_rows(&qkdsync(&[
        "budget",
        "--config",
        "configs/budget.toml",
        "--length-max",
        "0",
    ]));
    let default = csv_rows(&qkdsync(&["budget", "--length-max", "0"]));
    assert_eq!(rows, default);
}

#[test]
fn pd_noiseless_point() {
    let rows = csv_rows(&qkdsync(&[
        "pd", "--n", "30", "--dcp", "0", "--m", "0.6667", "--k", "0.25",
    ]));
    assert_eq!(rows.len(), 1);
    assert!((field(&rows[0], 7) - 0.99326).abs() < 1e-5);
}

#[test]
fn pd_preset_matches_library() {
    let rows = csv_rows(&qkdsync(&["pd", "--preset", "id230", "--m", "0.3"]));
    assert_eq!(rows.len(), 7);
    for row in &rows {
        let n = field(row, 0);
        let noise_mean = n * 50.0 * 2e-9;
        let p = DimensionlessParams {
            noise_mean,
            signal_mean: noise_mean + n * 0.25 * 0.3,
            n_intervals: 500_000,
            selection_size: Some(n as u32),
        };
        assert!((field(row, 7) - pd_full(&p)).abs() < 1e-12);
    }
}

#[test]
fn pd_reports_divergence_beyond_the_quoted_bound() {
    let rows = csv_rows(&qkdsync(&["pd", "--preset", "id230", "--n", "800"]));
    let divergence = field(&rows[0], 10);
    assert!(divergence > 2e-4 && divergence < 5e-3, "{divergence}");
}

#[test]
fn pd_rejects_bad_list() {
    let out = qkdsync(&["pd", "--n", "3.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scan_saturated_always_locks() {
    let v = stdout_json(&qkdsync(&[
        "scan",
        "--preset",
        "saturated",
        "--trials",
        "200",
    ]));
    assert_eq!(v["p_hat"], 1.0);
    assert_eq!(v["successes"], 200);
}

#[test]
fn scan_is_reproducible() {
    let args = [
        "scan", "--preset", "id230", "--trials", "500", "--seed", "11",
    ];
    let a = qkdsync(&args);
    let b = qkdsync(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn scan_rejects_dead_time_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.toml");
    let text = std::fs::read_to_string(workspace_root().join("configs/scan_id230.toml"))
        .unwrap()
        .replace("dead_time_s = 1e-5", "dead_time_s = 5e-3");
    std::fs::write(&path, text).unwrap();
    let out = qkdsync(&["scan", "--config", path.to_str().unwrap(), "--trials", "10"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The manifest holds enough to rerun the scan and get the same estimate.
#[test]
fn scan_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let out = qkdsync(&[
        "scan",
        "--preset",
        "id210",
        "--trials",
        "400",
        "--seed",
        "5",
        "--output",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&first).unwrap()).unwrap();
    let manifest = &v["manifest"];
    assert_eq!(manifest["outputs"][0], first.to_str().unwrap());

    let setup: qkdsync::presets::ScanSetup =
        serde_json::from_value(manifest["params"]["setup"].clone()).unwrap();
    let config = dir.path().join("setup.toml");
    std::fs::write(&config, toml_text(&setup)).unwrap();
    let trials = manifest["params"]["trials"].to_string();
    let seed = manifest["seed"].to_string();
    let rerun = stdout_json(&qkdsync(&[
        "scan",
        "--config",
        config.to_str().unwrap(),
        "--trials",
        &trials,
        "--seed",
        &seed,
    ]));
    for key in [
        "successes",
        "p_hat",
        "ci_low",
        "ci_high",
        "pd_full",
        "setup",
    ] {
        assert_eq!(rerun[key], v[key], "{key}");
    }
}

fn toml_text(setup: &qkdsync::presets::ScanSetup) -> String {
    let s = &setup.sync;
    let d = &setup.detector;
    let mut text = format!("mean_photons = {:e}\n", setup.mean_photons);
    if let Some(i) = setup.signal_interval {
        text += &format!("signal_interval = {i}\n");
    }
    if let Some(t) = setup.onset_s {
        text += &format!("onset_s = {t:e}\n");
    }
    text += &format!(
        "[sync]\nframe_period_s = {:e}\nn_intervals = {}\ninterval_width_s = {:e}\nselection_size = {}\npulse_width_s = {:e}\n",
        s.frame_period_s, s.n_intervals, s.interval_width_s, s.selection_size, s.pulse_width_s
    );
    text += &format!(
        "[detector]\ndark_rate_hz = {:e}\nquantum_efficiency = {:e}\ndead_time_s = {:e}\ngate_width_s = {:e}\n",
        d.dark_rate_hz, d.quantum_efficiency, d.dead_time_s, d.gate_width_s
    );
    text
}

#[test]
fn attack_clean_has_no_attacker_estimate() {
    let v = stdout_json(&qkdsync(&["attack", "--preset", "clean"]));
    assert_eq!(v["legit_sync_outcome"], "detected");
    assert_eq!(v["attacker_pd"], 0.0);
    assert!(v.get("attacker_length_estimate_m").is_none());
    assert!(v.get("attacker_length_error_m").is_none());
}

#[test]
fn attack_paper_recovers_channel_length() {
    let v = stdout_json(&qkdsync(&["attack", "--preset", "paper", "--seed", "4"]));
    assert_eq!(v["legit_sync_outcome"], "detected");
    assert!(v["attacker_length_error_m"].as_f64().unwrap() <= 0.11);
    assert!(v["attacker_pd"].as_f64().unwrap() > 0.99);
}

#[test]
fn attack_countermeasure_starves_the_attacker() {
    let paper = stdout_json(&qkdsync(&["attack", "--preset", "paper"]));
    let counter = stdout_json(&qkdsync(&["attack", "--preset", "countermeasure"]));
    let (p, c) = (
        paper["attacker_pd"].as_f64().unwrap(),
        counter["attacker_pd"].as_f64().unwrap(),
    );
    assert!(c < 0.05 && p > 0.99, "{c} vs {p}");
    assert_eq!(counter["legit_sync_outcome"], "detected");
}

#[test]
fn attack_config_found_through_config_dir() {
    let out = Command::new(env!("CARGO_BIN_EXE_qkdsync"))
        .args([
            "attack",
            "--config",
            "attack_interference.toml",
            "--seed",
            "3",
        ])
        .current_dir(std::env::temp_dir())
        .env("QKDSYNC_CONFIG_DIR", workspace_root().join("configs"))
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert!(v["resync_count"].as_u64().unwrap() >= 1);
    assert_eq!(v["legit_sync_outcome"], "detected");
}

#[test]
fn missing_config_is_usage_error() {
    let out = qkdsync(&["attack", "--config", "no_such_file.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = qkdsync(&["budget", "--lenght-max", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csv_output_gets_sidecar_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("budget.csv");
    let out = qkdsync(&[
        "budget",
        "--length-max",
        "3000",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let sidecar = dir.path().join("budget.csv.manifest.json");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(manifest["command"], "budget");
    assert_eq!(manifest["params"]["length_max"].as_f64(), Some(3000.0));
}

/// The quick audit exits non-zero: the divergence bound does not hold.
#[test]
fn validate_quick_flags_divergence_audit() {
    let start = std::time::Instant::now();
    let out = qkdsync(&["validate", "--quick"]);
    assert!(start.elapsed().as_secs() < 30);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    let failures: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failures.len(), 1, "{text}");
    assert!(failures[0].contains("divergence"), "{text}");
}
