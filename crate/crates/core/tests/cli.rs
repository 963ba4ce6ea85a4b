use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkdlink"))
}

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

#[test]
fn keyrate_prints_a_report() {
    let out = bin().args(["keyrate", "--counts"]).arg(data("table2_100km.toml")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let skr = report["skr"].as_f64().unwrap();
    assert!((skr / 1.18e4 - 1.0).abs() < 0.05, "{skr}");
}

#[test]
fn overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.json");
    let out = bin()
        .args(["keyrate", "--counts"])
        .arg(data("table2_50km.toml"))
        .args(["--f-ec", "1.0", "--eps-sec", "1e-10", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(report["security"]["f_ec"], 1.0);
    assert_eq!(report["security"]["eps_sec"], 1e-10);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[intensities]\nmu = 0.5\n").unwrap();
    let out = bin().args(["keyrate", "--counts"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "schema");
    assert!(err["problems"].as_array().unwrap().len() >= 4);

    let out = bin().args(["simulate", "--config"]).arg(dir.path().join("missing.toml")).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let text = std::fs::read_to_string(data("presets/0km.toml")).unwrap().replace("total_duration = 2.0", "total_duration = 0.2")
        .replace("block_duration = 1.0", "block_duration = 0.1");
    std::fs::write(&config, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().args(["simulate", "--config"]).arg(&config).args(["--seed", "9", "--out"]).arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["summary.json", "qber_trace.csv", "keyrate.json", "timing.json"] {
        assert!(out_dir.join(name).is_file(), "{name}");
    }
    let trace = std::fs::read_to_string(out_dir.join("qber_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn sync_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sb.toml");
    let text = std::fs::read_to_string(data("presets/sync_bench.toml"))
        .unwrap()
        .replace("losses_db = [0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0, 27.0, 30.0]", "losses_db = [0.0, 18.0]")
        .replace("include_boundary = true", "include_boundary = false");
    std::fs::write(&config, text).unwrap();
    let out = bin().args(["sync-bench", "--config"]).arg(&config).args(["--trials", "4", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sync_bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("loss_db,sqrt_l_eta,frames_needed,trials,lock_rate"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.0,") && rows[0].contains(",1,2,1.0,"), "{}", rows[0]);
}

#[test]
fn feedback_bench_writes_both_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fb.toml");
    let text = std::fs::read_to_string(data("presets/feedback_50km.toml"))
        .unwrap()
        .replace("duration = 8640.0\nblock_duration = 1.0\nruns = 16", "duration = 700.0\nblock_duration = 1.0\nruns = 1");
    std::fs::write(&config, text).unwrap();
    let out = bin().args(["feedback-bench", "--config"]).arg(&config).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["qber_trace_on_0.csv", "qber_trace_off_0.csv", "feedback_bench.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let on = std::fs::read_to_string(dir.path().join("qber_trace_on_0.csv")).unwrap();
    assert_eq!(on.lines().count(), 701);
}
