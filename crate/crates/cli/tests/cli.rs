use std::path::{Path, PathBuf};
use std::process::Command;

use bidrn_cli::{
    run, CommandResult, CHECKPOINT_FILE, EXIT_FAILED, EXIT_OK, EXIT_USAGE, TRACE_FILE,
};

fn cli(args: &[&str]) -> CommandResult {
    run(std::iter::once("bidrn").chain(args.iter().copied()))
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bidrn"))
}

#[test]
fn verify_default_passes_at_least_500_cases() {
    let r = cli(&["verify"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.summary);
    let suites = r.json.unwrap()["suites"].as_array().unwrap().clone();
    let passed: u64 = suites.iter().map(|s| s["passed"].as_u64().unwrap()).sum();
    assert!(passed >= 500);
}

#[test]
fn verify_cases_flag_is_exact() {
    let r = cli(&["verify", "--cases", "10", "--seed", "4"]);
    assert_eq!(r.code, EXIT_OK);
    for s in r.json.unwrap()["suites"].as_array().unwrap() {
        assert_eq!(s["cases"], 10);
        assert_eq!(s["passed"], 10);
    }
}

#[test]
fn verify_fault_injection_exits_1_with_counterexample() {
    let r = cli(&["verify", "--cases", "20", "--inject-fault", "mask"]);
    assert_eq!(r.code, EXIT_FAILED);
    assert!(r.summary.contains("first counterexample (kernel_oracle)"));
    let out = binary()
        .args(["verify", "--cases", "20", "--inject-fault", "mask"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_FAILED));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"case\""));
}

#[test]
fn verify_is_deterministic() {
    assert_eq!(
        cli(&["verify", "--cases", "25", "--seed", "3"]),
        cli(&["verify", "--cases", "25", "--seed", "3"])
    );
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = cli(&["gradcheck", "--seed", "5"]);
    assert_eq!(a.code, EXIT_OK, "{}", a.summary);
    assert!(a.summary.contains("max |g| = 0"));
    let json = a.json.clone().unwrap();
    assert_eq!(json["ste_saturated_max_grad"], 0.0);
    for r in json["reports"].as_array().unwrap() {
        assert!(r["worst_relative"].as_f64().unwrap() < 1e-3, "{r}");
    }
    assert_eq!(a, cli(&["gradcheck", "--seed", "5"]));
}

#[test]
fn gradcheck_tolerance_breach_names_the_rule() {
    let r = cli(&["gradcheck", "--rel-tol", "0"]);
    assert_eq!(r.code, EXIT_FAILED);
    assert!(r.summary.contains("exceeded by:"));
}

#[test]
fn stats_matches_golden_byte_for_byte() {
    let out = binary()
        .args(["stats", "--config"])
        .arg(repo_file("configs/tiny.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let golden = std::fs::read(repo_file("configs/tiny.stats.json")).unwrap();
    assert_eq!(out.stdout, golden);

    let dir = tempfile::tempdir().unwrap();
    let written = dir.path().join("s.json");
    let r = cli(&[
        "stats",
        "--config",
        repo_file("configs/tiny.json").to_str().unwrap(),
        "--out",
        written.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK);
    assert_eq!(std::fs::read(written).unwrap(), golden);
}

#[test]
fn stats_errors_exit_2() {
    assert_eq!(
        cli(&["stats", "--config", "/definitely/missing.json"]).code,
        EXIT_USAGE
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        "{\n  \"input_shape\": [3, 8, 8],\n  \"blocks\": [,]\n}",
    )
    .unwrap();
    let r = cli(&["stats", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.summary.contains("line 3"), "{}", r.summary);
    std::fs::write(
        &bad,
        r#"{"input_shape": [3, 8, 8], "blocks": [], "colour": 1}"#,
    )
    .unwrap();
    let r = cli(&["stats", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.summary.contains("colour"), "{}", r.summary);
    assert_eq!(cli(&["stats"]).code, EXIT_USAGE);
}

#[test]
fn all_fp_config_has_no_binarized_params() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fp.json");
    let cfg = r#"{
  "input_shape": [4, 8, 8],
  "binarized": false,
  "blocks": [
    {"kind": "base_lcr", "in_channels": 4, "out_channels": 4, "stride": 1, "block_residual": "fp1x1"},
    {"kind": "down_scale", "in_channels": 4, "out_channels": 4, "stride": 2}
  ]
}"#;
    std::fs::write(&p, cfg).unwrap();
    let r = cli(&["stats", "--config", p.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK, "{}", r.summary);
    let j = r.json.unwrap();
    assert_eq!(j["params_bin_latent"], 0);
    assert_eq!(j["ops_bin"], 0);
}

#[test]
fn init_config_then_stats_for_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "base-lcr",
        "full-bidrb",
        "table4a-step-0",
        "table4a-step-2",
        "table4a-step-4",
    ] {
        let p = dir.path().join(format!("{name}.json"));
        let r = cli(&["init-config", name, "--out", p.to_str().unwrap()]);
        assert_eq!(r.code, EXIT_OK, "{}", r.summary);
        let s = cli(&["stats", "--config", p.to_str().unwrap()]);
        assert_eq!(s.code, EXIT_OK, "{name}: {}", s.summary);
    }
    assert_eq!(cli(&["init-config", "table4a-step-5"]).code, EXIT_USAGE);
    let shipped = std::fs::read_to_string(repo_file("configs/tiny.json")).unwrap();
    let a: serde_json::Value = serde_json::from_str(&shipped).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&cli(&["init-config", "full-bidrb"]).summary).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_toy_zero_steps_gives_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(&[
        "train-toy",
        "--config",
        repo_file("configs/tiny.json").to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.summary);
    let trace = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn train_toy_is_deterministic_and_loads_back() {
    let cfg_path = repo_file("configs/tiny.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let r = cli(&[
            "train-toy",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "6",
            "--seed",
            "3",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(r.code, EXIT_OK, "{}", r.summary);
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, TRACE_FILE), read(&b, TRACE_FILE));
    assert_eq!(read(&a, CHECKPOINT_FILE), read(&b, CHECKPOINT_FILE));

    let cfg = bidrn_core::layers::NetworkConfig::from_path(&cfg_path).unwrap();
    let mut net = bidrn_core::layers::build_network::<f32>(&cfg).unwrap();
    net.load(a.path().join(CHECKPOINT_FILE)).unwrap();
}

#[test]
fn train_toy_rejects_mismatched_head() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(
        &p,
        r#"{"input_shape": [2, 8, 8], "blocks": [], "head_outputs": 4}"#,
    )
    .unwrap();
    let r = cli(&[
        "train-toy",
        "--config",
        p.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn bench_small_emits_csv() {
    let out = binary()
        .args(["bench", "--sizes", "small", "--reps", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("name,c_in"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
    assert_eq!(cli(&["bench", "--sizes", "huge"]).code, EXIT_USAGE);
    assert_eq!(cli(&["bench", "--reps", "0"]).code, EXIT_USAGE);
}

#[test]
fn thread_env_var_is_validated() {
    let out = binary()
        .env("BIDRN_THREADS", "zero")
        .args(["verify", "--cases", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = binary()
        .env("BIDRN_THREADS", "1")
        .args(["verify", "--cases", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(cli(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(cli(&[]).code, EXIT_USAGE);
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
    assert!(!cli(&["verify", "--help"]).summary.contains("inject-fault"));
}
