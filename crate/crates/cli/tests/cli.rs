use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmerge")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "federation": { "clients": 4, "partition": { "type": "cluster", "clusters": 2 }, "samples_per_client": 40 },
  "data": { "source": "synthetic", "input_dim": 3, "num_classes": 2 },
  "model": { "kind": "logistic", "input_dim": 3, "num_classes": 2 },
  "method": "fedmerge",
  "server": { "d": 2, "rounds": 4, "eta_w": 5.0, "local": { "lr": 0.1, "epochs": 1, "batch_size": 8 } },
  "eval_every": 2,
  "seeds": [0, 1]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gradcheck_passes_and_flags_an_injected_fault() {
    let ok = fedmerge(&["gradcheck", "--instances", "2"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert_eq!(stdout(&ok).matches("PASS").count(), 6);

    let bad = fedmerge(&["gradcheck", "--instances", "2", "--inject-fault", "soup_gradient_softmax"]);
    assert_eq!(bad.status.code(), Some(1));
    let out = stdout(&bad);
    assert_eq!(out.matches("FAIL").count(), 1);
    assert!(out.lines().any(|l| l.starts_with("soup_gradient_softmax") && l.ends_with("FAIL")));

    let unknown = fedmerge(&["gradcheck", "--inject-fault", "nope"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("logit_gradient_softmax"));
}

#[test]
fn run_then_export_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("out");
    let run = fedmerge(&["run", "--config", &config, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(out.join("summary.json").is_file());
    assert!(!out.join("seed_0").exists());

    let seed_dir = out.join("seed_1");
    let export = fedmerge(&["weights-export", "--run", seed_dir.to_str().unwrap(), "--round", "4"]);
    assert!(export.status.success(), "{}", stderr(&export));
    let text = stdout(&export);
    assert_eq!(text.lines().filter(|l| l.contains(',')).count(), 4);
    assert!(text.contains("block_structure_score"));

    let missing = fedmerge(&["weights-export", "--run", seed_dir.to_str().unwrap(), "--round", "3"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("[0, 2, 4]"), "{}", stderr(&missing));
}

#[test]
fn invalid_config_reports_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &CONFIG.replace("\"d\": 2", "\"d\": 0"));
    let run = fedmerge(&["run", "--config", &config]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("server.d"), "{}", stderr(&run));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("from_env");
    let run = Command::new(env!("CARGO_BIN_EXE_fedmerge"))
        .args(["gen-data", "--config", &config, "--seed", "3"])
        .env("FEDMERGE_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(out.join("data_seed_3").join("client_000.csv").is_file());
    assert!(out.join("data_seed_3").join("federation.json").is_file());
}
