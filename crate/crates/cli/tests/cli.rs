use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "schema": 1,
    "seed": 2,
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 64, "max_seq_len": 64},
    "pretrain": {"learning_rate": 0.3, "steps": 10, "batch_size": 4, "gradient_clip": 1.0},
    "tuning": {"learning_rate": 0.3, "steps": 10, "batch_size": 4, "gradient_clip": 1.0},
    "dataset": {"kind": "synthetic", "n_pairs": 20},
    "studies": ["sweep", "controls"]
}"#;

fn alignlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let err = stderr(o);
    let line = err.lines().find(|l| l.starts_with("error[")).unwrap_or_else(|| panic!("no error line in {err:?}"));
    line.to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn default_config_is_valid_json() {
    let o = alignlab(&["default-config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["model"]["n_layers"], 8);
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for cmd in ["gen-data", "train"] {
        let o = alignlab(&[cmd, "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = alignlab(&["study", "--config", &cfg, "--out", out, "--study", "sweep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(out).join("studies/sweep.csv").is_file());
    assert!(!Path::new(out).join("studies/controls.csv").exists());

    // Missing study outputs are not an error for the report.
    let o = alignlab(&["report", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let html = std::fs::read_to_string(Path::new(out).join("report.html")).unwrap();
    assert!(html.contains("not run"));

    let o = alignlab(&["study", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(out).join("studies/controls.csv").is_file());
}

#[test]
fn run_uses_config_output_dir_when_out_is_omitted() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-config");
    let text = TINY.replacen(
        "\"seed\": 2,",
        &format!("\"seed\": 2, \"output_dir\": {},", serde_json::to_string(target.to_str().unwrap()).unwrap()),
        1,
    );
    let cfg = write_config(dir.path(), &text);
    let o = alignlab(&["run", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("manifest.json").is_file());
    assert!(target.join("report.html").is_file());
}

#[test]
fn failures_print_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = alignlab(&["train", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert!(error_line(&o).starts_with("error[missing]: "));

    let bad = write_config(dir.path(), &TINY.replacen("\"seed\": 2,", "\"seed\": 2, \"colour\": 1,", 1));
    let o = alignlab(&["gen-data", "--config", &bad, "--out", "x"]);
    assert!(error_line(&o).starts_with("error[config]: "));

    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("empty");
    std::fs::create_dir(&out).unwrap();
    let o = alignlab(&["study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let line = error_line(&o);
    assert!(line.starts_with("error[missing]: ") && line.contains("base.json"), "{line}");

    std::fs::write(out.join(".alignlab.lock"), "").unwrap();
    let o = alignlab(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(error_line(&o).starts_with("error[locked]: "));
}

#[test]
fn unknown_study_is_a_usage_error() {
    let o = alignlab(&["study", "--config", "c.json", "--out", "o", "--study", "everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("everything"));
}
