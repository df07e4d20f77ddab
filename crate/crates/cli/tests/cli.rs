use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fivo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fivo"))
        .args(args)
        .output()
        .expect("fivo runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path.display().to_string()
}

fn estimate_config() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(configs().join("estimate-lgssm.json")).unwrap()).unwrap()
}

#[test]
fn estimate_writes_one_row_per_objective_and_particle_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = fivo(&[
        "estimate",
        "--config",
        &config("estimate-lgssm.json"),
        "--seed",
        "3",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &run_dirs(&out)[0];
    let csv = std::fs::read_to_string(dir.join("estimate.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "format_version,objective,N,policy,mean,se,replicates,seed");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1..].iter().all(|l| l.starts_with("1,") && l.ends_with(",1000,3")));
    let m = manifest(dir);
    assert_eq!(m["command"], "estimate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"][0]["path"], "estimate.csv");
    let name = dir.file_name().unwrap().to_str().unwrap();
    let digest = name.rsplit('-').next().unwrap();
    assert_eq!(digest.len(), 8);
}

#[test]
fn same_config_and_seed_give_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    for jobs in ["1", "3"] {
        let o = fivo(&[
            "estimate",
            "--config",
            &config("estimate-lgssm.json"),
            "--seed",
            "9",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 2);
    let a = std::fs::read(dirs[0].join("estimate.csv")).unwrap();
    let b = std::fs::read(dirs[1].join("estimate.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_objective_exits_with_usage_code_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = estimate_config();
    cfg["objectives"][1]["kind"] = "vae".into();
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let o = fivo(&[
        "estimate",
        "--config",
        &path,
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("objectives[1]"), "{err}");
}

#[test]
fn invalid_value_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = estimate_config();
    cfg["model"]["var_x"] = (-1.0).into();
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let o = fivo(&[
        "estimate",
        "--config",
        &path,
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`model`"));
}

#[test]
fn collapsing_estimator_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = estimate_config();
    cfg["data"] = serde_json::json!({"kind": "inline", "values": [0.0, 1e200, 0.0]});
    cfg["objectives"] = serde_json::json!([{"kind": "fivo", "n_particles": 4, "policy": {"kind": "always"}}]);
    cfg["particles"] = serde_json::json!([]);
    let path = write_config(tmp.path(), "collapse.json", &cfg);
    let o = fivo(&[
        "estimate",
        "--config",
        &path,
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_dataset_path_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("train-nonlinear.json")).unwrap()).unwrap();
    cfg["data"] = serde_json::json!({"kind": "file", "path": "no-such-data.json"});
    let path = write_config(tmp.path(), "train.json", &cfg);
    let o = fivo(&[
        "train",
        "--config",
        &path,
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_4_and_keeps_history() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("train-nonlinear.json")).unwrap()).unwrap();
    cfg["train"]["learning_rate"] = 1e6.into();
    let path = write_config(tmp.path(), "train.json", &cfg);
    let out = tmp.path().join("runs");
    let o = fivo(&["train", "--config", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let dir = &run_dirs(&out)[0];
    assert_eq!(manifest(dir)["exit_code"], 4);
    assert!(dir.join("steps.csv").exists());
}

#[test]
fn train_from_a_data_file_records_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("data.json"),
        r#"{"train": [[0.1, -0.3, 0.8, 1.1], [0.0, 0.2, -0.4, 0.5]], "validation": [[0.3, 0.1, 0.0, -0.2]]}"#,
    )
    .unwrap();
    let cfg = serde_json::json!({
        "model": {"kind": "lgssm", "a": 0.5, "c": 1.0, "var_z": 1.0, "var_x": 1.0, "var_0": 1.0},
        "data": {"kind": "file", "path": "data.json"},
        "train": {"objective": {"kind": "elbo"}, "learning_rate": 0.01, "max_steps": 5, "validation_every": 2}
    });
    let path = write_config(tmp.path(), "train.json", &cfg);
    let out = tmp.path().join("runs");
    let o = fivo(&["train", "--config", &path, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &run_dirs(&out)[0];
    let m = manifest(dir);
    assert!(m["inputs"][0]["path"].as_str().unwrap().ends_with("data.json"));
    let steps = std::fs::read_to_string(dir.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 5);
    let checkpoint: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(checkpoint["model"]["kind"], "lgssm");
}

#[test]
fn sweep_emits_four_manifests_with_one_selected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = fivo(&[
        "sweep",
        "--config",
        &config("sweep-lgssm.json"),
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &run_dirs(&out)[0];
    let cells = run_dirs(dir);
    assert_eq!(cells.len(), 4);
    let selected: Vec<bool> = cells
        .iter()
        .map(|c| manifest(c)["details"]["selected"].as_bool().unwrap())
        .collect();
    assert_eq!(selected.iter().filter(|s| **s).count(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    let best = runs
        .iter()
        .max_by(|a, b| {
            a["validation"]
                .as_f64()
                .unwrap()
                .total_cmp(&b["validation"].as_f64().unwrap())
        })
        .unwrap();
    assert_eq!(best["selected"], true);
    assert_eq!(summary["selected_learning_rate"], best["learning_rate"]);
}

#[test]
fn verify_reports_each_assertion_and_fails_under_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = fivo(&[
        "verify",
        "--suite",
        "prop2",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let report = std::fs::read_to_string(run_dirs(&out)[0].join("report.csv")).unwrap();
    assert!(report.starts_with("format_version,suite,assertion,measured,threshold,passed,reference\n"));
    assert!(report.lines().skip(1).all(|l| l.contains(",true,")));

    let cfg = serde_json::json!({"suites": ["unbiasedness"], "scale": "quick", "fault": "skip_weight_normalization"});
    let path = write_config(tmp.path(), "fault.json", &cfg);
    let o = fivo(&[
        "verify",
        "--config",
        &path,
        "--out",
        tmp.path().join("fault").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fivo(&["verify", "--suite", "prop9", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_rejects_an_edited_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = fivo(&["verify", "--suite", "prop2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let dir = &run_dirs(&out)[0];
    let cfg = dir.join("config.json");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("full", "quick");
    std::fs::write(&cfg, text).unwrap();
    let o = fivo(&["replay", "--manifest", dir.join("manifest.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn jobs_and_out_can_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-runs");
    let o = Command::new(env!("CARGO_BIN_EXE_fivo"))
        .args(["verify", "--suite", "prop2"])
        .env("FIVO_OUT", &out)
        .env("FIVO_JOBS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = manifest(&run_dirs(&out)[0]);
    assert_eq!(m["jobs"], 2);
}
