use std::fs;
use std::process::{Command, Output};

const BASE: &str = r#"
seed = 3
output = "out"
experiments = ["front"]
[model]
name = "gasless_combustion"
params = { beta = 0.5 }
[grid]
half_width = 30.0
nodes = 601
"#;

fn frontlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frontlab")).args(args).output().unwrap()
}

fn run_text(text: &str) -> (tempfile::TempDir, Output) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, text).unwrap();
    let out = frontlab(&["run", path.to_str().unwrap()]);
    (dir, out)
}

#[test]
fn describe_lists_topics_on_unknown_input() {
    let ok = frontlab(&["describe", "pipeline"]);
    assert!(ok.status.success());
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("spectrum") && text.contains("verify"));

    let config = String::from_utf8(frontlab(&["describe", "config"]).stdout).unwrap();
    for key in ["[model]", "[grid]", "[weight]", "[rates]", "[lp]", "[samples]", "seed"] {
        assert!(config.contains(key), "{key}");
    }

    let bad = frontlab(&["describe", "bogus"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8(bad.stderr).unwrap();
    assert!(err.contains("config, pipeline, outputs, models"), "{err}");
}

#[test]
fn front_run_resolves_output_next_to_config() {
    let (dir, out) = run_text(BASE);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert!(summary["front"]["c"].as_f64().unwrap() > 0.7);
    assert_eq!(fs::read_to_string(dir.path().join("out/MANIFEST")).unwrap(), "front complete front.csv\n");
}

#[test]
fn missing_model_parameter_exits_nonzero_with_field_path() {
    let (_dir, out) = run_text(&BASE.replace("params = { beta = 0.5 }", ""));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("model.params.beta"), "{err}");
}

#[test]
fn schema_violation_names_the_field() {
    let (_dir, out) = run_text(&BASE.replace("nodes = 601", "nodes = -4"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("grid.nodes"));
}

#[test]
fn inadmissible_weight_is_rejected_and_partial_outputs_kept() {
    let text = BASE.replace("[\"front\"]", "[\"spectrum\"]") + "[weight]\nalpha_minus = 1.0\n";
    let (dir, out) = run_text(&text);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("0 < alpha_minus < -omega_minus"), "{err}");
    let manifest = fs::read_to_string(dir.path().join("out/MANIFEST")).unwrap();
    assert!(manifest.starts_with("front complete") && manifest.contains("spectrum failed"), "{manifest}");
}

#[test]
fn failed_check_gives_exit_one() {
    let text = BASE.replace("[\"front\"]", "[\"spectrum\"]") + "[weight]\nalpha_plus = 0.0\n";
    let (dir, out) = run_text(&text);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FAIL spectrum/essential_spectrum_negative"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], false);
    assert_eq!(summary["spectrum"]["hypothesis_pass"], false);
}

#[test]
fn exo_endo_defaults_satisfy_the_spectral_hypotheses() {
    let text = r#"
experiments = ["spectrum"]
output = "out"
[model]
name = "exo_endo"
[grid]
half_width = 60.0
nodes = 2401
"#;
    let (dir, out) = run_text(text);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["spectrum"]["hypothesis_pass"], true);
    assert!(summary["spectrum"]["nu"].as_f64().unwrap() > 0.01);
}
