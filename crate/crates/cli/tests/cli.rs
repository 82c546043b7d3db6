use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../sample/pipeline.toml")
}

fn ranstruct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranstruct")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_all_writes_dataset_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = ranstruct(&[
        "--config",
        sample_config().to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "pipeline",
        "all",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let pairs = summary["gena"]["metrics"]["total_pairs"].as_u64().unwrap();
    assert_eq!(pairs, summary["genq"]["valid"].as_u64().unwrap());
    assert!(pairs > 0);
    for stage in ["ingest", "split", "index", "genq", "gena"] {
        assert!(run.join(format!("manifest.{stage}.json")).is_file(), "{stage}");
    }

    let stats =
        ranstruct(&["-c", sample_config().to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "dataset", "stats"]);
    assert_eq!(stats.status.code(), Some(0));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&stats)).unwrap();
    assert_eq!(metrics["total_pairs"].as_u64(), Some(pairs));
}

#[test]
fn sequential_flag_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = sample_config();
    let mut dumps = Vec::new();
    for (i, flag) in [None, Some("--sequential")].into_iter().enumerate() {
        let run = tmp.path().join(format!("run{i}"));
        let mut args = vec!["-c", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
        args.extend(flag);
        args.extend(["pipeline", "all"]);
        assert_eq!(ranstruct(&args).status.code(), Some(0));
        dumps.push(fs::read(run.join("dataset.jsonl")).unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn bench_score_from_accuracies() {
    let out = ranstruct(&["bench", "score", "--accuracies", "0.698,0.618,0.584,0.848"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("Average     0.633"), "{text}");
    assert!(text.contains("Cumulative  0.740"), "{text}");

    let json =
        ranstruct(&["bench", "score", "--accuracies", "0.856,0.784,0.738,0.796", "--baseline", "0.760", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["scores"]["cumulative_score"].as_f64(), Some(0.794));
    assert_eq!(v["improvement_percent"].as_f64(), Some(4.47));
}

#[test]
fn bench_run_then_score_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = sample_config();
    let base = ["-c", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
    let out = ranstruct(&[&base[..], &["bench", "run", "--per-category", "2", "--seed", "3"]].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["items"].as_u64(), Some(8));

    let scored = ranstruct(&[&base[..], &["bench", "score", "--json"]].concat());
    assert_eq!(scored.status.code(), Some(0));
    let s: serde_json::Value = serde_json::from_str(&stdout(&scored)).unwrap();
    assert_eq!(s["scores"], v["scores"]);
}

#[test]
fn energy_report_for_constant_load() {
    let out = ranstruct(&["energy", "report", "--constant", "100,0,0", "--duration-s", "36", "--phase", "inference"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["report"]["total_wh"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(v["report"]["phase"], "inference");
}

#[test]
fn energy_report_compares_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, watts: f64| {
        let p = tmp.path().join(name);
        let lines: String = (0..=10)
            .map(|t| format!("{{\"t_s\":{t}.0,\"cpu_w\":{watts},\"gpu_w\":{watts},\"ram_w\":null}}\n"))
            .collect();
        fs::write(&p, lines).unwrap();
        p
    };
    let base = write("train.jsonl", 36.0);
    let infer = write("infer.jsonl", 48.0);
    let out =
        ranstruct(&["energy", "report", "--trace", infer.to_str().unwrap(), "--baseline", base.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["overhead_percent"].as_f64(), Some(33.33));
    assert_eq!(v["report"]["unavailable"], serde_json::json!(["ram"]));

    fs::write(tmp.path().join("bad.jsonl"), "{\"t_s\":1.0,\"cpu_w\":1.0,\"gpu_w\":null,\"ram_w\":null}\n").unwrap();
    let bad = ranstruct(&["energy", "report", "--trace", tmp.path().join("bad.jsonl").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn qlora_demo_reports_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ranstruct(&[
        "--run-dir",
        tmp.path().to_str().unwrap(),
        "qlora",
        "demo",
        "--rows",
        "64",
        "--cols",
        "32",
        "--rank",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["forward_max_rel_diff"].as_f64().unwrap() <= 1e-8);
    assert!(v["worst_bound_ratio"].as_f64().unwrap() <= 1.0);
    assert!(tmp.path().join("qlora_weights.nf4").is_file());
}

#[test]
fn track_energy_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ranstruct(&[
        "--run-dir",
        tmp.path().to_str().unwrap(),
        "--track-energy",
        "qlora",
        "demo",
        "--rows",
        "32",
        "--cols",
        "16",
        "--rank",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("energy.qlora.json")).unwrap()).unwrap();
    assert_eq!(report["phase"], "qlora");
    assert!(tmp.path().join("energy.qlora.trace.jsonl").is_file());
}

#[test]
fn exit_codes_separate_bad_input_from_failures() {
    assert_eq!(ranstruct(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ranstruct(&["bench", "score", "--accuracies", "0.5,0.5"]).status.code(), Some(1));
    assert_eq!(ranstruct(&["--config", "/no/such/file.toml", "ingest"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let missing = ranstruct(&["--run-dir", tmp.path().to_str().unwrap(), "gena"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("run `genq` first"));

    // An unreachable endpoint is a runtime failure, not a validation error.
    let cfg = tmp.path().join("p.toml");
    fs::create_dir(tmp.path().join("docs")).unwrap();
    fs::write(tmp.path().join("docs/a.txt"), "Fronthaul timing is defined per slot. Each slot has fourteen symbols.")
        .unwrap();
    fs::write(
        &cfg,
        "[[corpus]]\nroot = \"docs\"\nkind = \"oran\"\n\n[agents.embedder]\nendpoint_url = \"http://127.0.0.1:9\"\nretry_limit = 0\ntimeout_ms = 500\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(ranstruct(&["-c", c, "ingest"]).status.code(), Some(0));
    assert_eq!(ranstruct(&["-c", c, "split"]).status.code(), Some(0));
    assert_eq!(ranstruct(&["-c", c, "index", "build"]).status.code(), Some(2));
}

#[test]
fn logs_are_json_lines_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ranstruct"))
        .args(["-c", sample_config().to_str().unwrap(), "--run-dir", tmp.path().to_str().unwrap(), "ingest"])
        .env_remove("RUST_LOG")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    let first = err.lines().next().expect("an info line");
    let v: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(v["level"], "INFO");
}
