use std::path::Path;
use std::process::{Command, Output};

fn dea_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dea-lab"))
        .args(args)
        .output()
        .expect("spawn dea-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn quick_manifest() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../manifests/quick.json")
        .display()
        .to_string()
}

#[test]
fn gait_pose_with_zero_elongations_prints_half_height_and_width() {
    let out = dea_lab(&["gait", "pose"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let head = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let col = |name: &str| row[head.iter().position(|h| h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("h_c"), 20.0);
    assert_eq!(col("w_c"), 20.0);
}

#[test]
fn gait_pose_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unit.toml");
    std::fs::write(&cfg, "[geometry]\nh = 60.0\nb = 30.0\nl = 45.0\ntheta_l = 30.0\n").unwrap();
    let out = dea_lab(&["gait", "pose", "--config", cfg.to_str().unwrap(), "--mode", "corrected"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out).lines().nth(1).unwrap().to_string();
    assert!(line.starts_with("0,0,0,0,0,0,30,15,"), "{line}");
}

#[test]
fn gait_cycle_emits_three_phases_per_unit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unit.json");
    std::fs::write(&cfg, r#"{"units": 2, "cycle_freq": 6.0}"#).unwrap();
    let out = dea_lab(&["gait", "cycle", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 1 + 2 * 3);
}

#[test]
fn report_on_empty_run_dir_fails_with_no_trials() {
    let dir = tempfile::tempdir().unwrap();
    let out = dea_lab(&["campaign", "report", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no trials"));
}

#[test]
fn invalid_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("bad.json");
    std::fs::write(&m, r#"{"schema_version": 99}"#).unwrap();
    let out = dea_lab(&["campaign", "run", m.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

#[test]
fn campaign_runs_are_reproducible_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = dea_lab(&["campaign", "run", &quick_manifest(), "--out", out.to_str().unwrap(), "-q"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("45 V/um @ 50 Hz"));
    }
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("trials.csv")).unwrap(),
        std::fs::read(b.join("trials.csv")).unwrap()
    );

    std::fs::remove_file(a.join("report.json")).unwrap();
    let o = dea_lab(&["campaign", "report", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), ra);
}

#[test]
fn seed_flag_changes_device_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = dea_lab(&["campaign", "run", &quick_manifest(), "--seed", "11", "--out", out.to_str().unwrap(), "-q"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 11);
}

#[test]
fn data_dir_env_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dea-lab"))
        .args(["campaign", "run", &quick_manifest(), "-q"])
        .env("DEA_LAB_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("quick-s3/report.json").exists());
}

#[test]
fn trial_run_prints_record_and_writes_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dea_lab(&[
        "trial", "run", "--field", "50", "--freq", "50", "--filler", "CG", "--cnt", "2.9", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(rec["status"], "Complete");
    assert_eq!(rec["lifetime"]["censored"], false);
    let r = rec["telemetry_ref"].as_str().unwrap();
    let lines = std::fs::read_to_string(dir.path().join("telemetry/ch0.jsonl")).unwrap();
    assert!(r.ends_with(&format!("-L{}", lines.lines().count())), "{r}");
}

#[test]
fn trial_run_rejects_unknown_filler() {
    let out = dea_lab(&["trial", "run", "--field", "40", "--freq", "1", "--filler", "XX"]);
    assert!(!out.status.success());
}

#[test]
fn rig_demo_walks_through_modes_and_refuses_impedance_with_hv_live() {
    let out = dea_lab(&["rig", "demo"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("impedance request refused: interlock"));
    assert!(text.contains("clamp_converged"));
    assert!(text.contains("\"to\":\"impedance_sweep\""));
    assert!(text.trim_end().ends_with("\"to\":\"idle\"}"));
}
