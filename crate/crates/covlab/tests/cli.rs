use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn covlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covlab")).args(args).output().expect("binary runs")
}

/// Writes the base configuration with the top-level keys of `overlay`
/// replaced. An empty overlay keeps the hand-formatted text.
fn write_config(dir: &Path, name: &str, overlay: serde_json::Value) -> String {
    let text = format!(
        r#"{{
  "seed": 5,
  "spec": {{"weights": [0.4, 0.6], "means": [[-1.5], [1.0]], "var": 0.2}},
  "schedule": {{"kind": "linear", "steps": 30}},
  "net": {{"embed_dim": 8, "hidden": 16, "depth": 1, "head_hidden": 8, "head_skip": true}},
  "train": {{
    "stage1": {{"iterations": 100, "batch_size": 16}},
    "stage2": {{"iterations": 40, "batch_size": 16}},
    "heads": ["sn", "npr"]
  }},
  "eval": {{"models": ["oracle:analytic", "oracle:npr"], "k": [3, 0], "trajectory": "both", "mc": 50, "cost_mc": 20, "analytic_mc": 50}},
  "sample": {{"model": "oracle:npr", "k": 5, "batch": 64}},
  "trajectory": {{"model": "oracle:sn", "k": [2, 4], "mc": 20}},
  "output": "{}"
}}"#,
        dir.join("out").display()
    );
    let overlay = overlay.as_object().cloned().unwrap_or_default();
    let text = if overlay.is_empty() {
        text
    } else {
        let mut base: serde_json::Value = serde_json::from_str(&text).unwrap();
        for (k, v) in overlay {
            base[k] = v;
        }
        serde_json::to_string_pretty(&base).unwrap()
    };
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_checkpoints_and_losses() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    assert_ok(&covlab(&["train", "--config", &config]));
    let out = dir.path().join("out");
    let losses = std::fs::read_to_string(out.join("loss_stage1.csv")).unwrap();
    assert_eq!(losses.lines().count(), 101);
    assert_eq!(losses.lines().next(), Some("iteration,loss"));
    assert_eq!(std::fs::read_to_string(out.join("loss_npr.csv")).unwrap().lines().count(), 41);
    for f in ["eps.json", "sn.json", "npr.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let eval = dir.path().join("eval");
    let config = write_config(
        dir.path(),
        "net.json",
        json!({
            "checkpoints": out,
            "eval": {"models": ["net:npr", "net:sn", "net:analytic"], "k": [3], "trajectory": "even", "mc": 20, "analytic_mc": 20}
        }),
    );
    assert_ok(&covlab(&["eval-elbo", "--config", &config, "--out", eval.to_str().unwrap()]));
    let table = std::fs::read_to_string(eval.join("elbo.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn resume_keeps_stage_one_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    assert_ok(&covlab(&["train", "--config", &config]));
    let first = dir.path().join("out").join("eps.json");
    let second_dir = dir.path().join("again");
    let resumed = write_config(
        dir.path(),
        "r.json",
        json!({
            "checkpoints": second_dir,
            "train": {"stage2": {"iterations": 40, "batch_size": 16}, "heads": ["npr"], "resume": first}
        }),
    );
    assert_ok(&covlab(&["train", "--config", &resumed, "--out", second_dir.to_str().unwrap()]));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(second_dir.join("eps.json")).unwrap());
    assert!(!second_dir.join("loss_stage1.csv").exists());
    assert!(second_dir.join("npr.json").exists());
}

#[test]
fn invalid_spec_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    let text = std::fs::read_to_string(&config).unwrap().replace("[0.4, 0.6]", "[0.4, 0.7]");
    std::fs::write(&config, text).unwrap();
    let out = covlab(&["eval-elbo", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = covlab(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ddim_is_rejected_for_elbo() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({"process": "ddim"}));
    let out = covlab(&["eval-elbo", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ddim"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({"sample": {"model": "net:npr"}}));
    let out = covlab(&["sample", "--config", &config]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&covlab(&["eval-elbo", "--config", &config, "--out", a.to_str().unwrap()]));
    assert_ok(&covlab(&["eval-elbo", "--config", &config, "--threads", "2", "--out", b.to_str().unwrap()]));
    let table = std::fs::read(a.join("elbo.csv")).unwrap();
    assert_eq!(table, std::fs::read(b.join("elbo.csv")).unwrap());
    let text = String::from_utf8(table).unwrap();
    assert_eq!(text.lines().next(), Some("model,mode,K,trajectory,value,stderr,seed,M,tau"));
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(text.contains(",30,ET,"));
}

#[test]
fn sample_and_trajectory_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    assert_ok(&covlab(&["sample", "--config", &config]));
    let out = dir.path().join("out");
    let first = std::fs::read(out.join("samples.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 65);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["count"], 64);
    assert_ok(&covlab(&["sample", "--config", &config]));
    assert_eq!(first, std::fs::read(out.join("samples.csv")).unwrap());

    assert_ok(&covlab(&["trajectory", "--config", &config, "--threads", "2"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("trajectory.json")).unwrap()).unwrap();
    let entries = report["trajectories"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert!(e["optimal_cost"].as_f64().unwrap() <= e["even_cost"].as_f64().unwrap() + 1e-12);
    }
    let cost = std::fs::read_to_string(out.join("cost.csv")).unwrap();
    assert_eq!(cost.lines().count(), 1 + 30 * 31 / 2);
}

#[test]
fn verify_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = covlab(&["verify", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 10);
}

#[test]
fn plot_data_collects_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", json!({}));
    assert_ok(&covlab(&["eval-elbo", "--config", &config]));
    let results = dir.path().join("out");
    assert_ok(&covlab(&["plot-data", results.to_str().unwrap()]));
    let tidy = std::fs::read_to_string(results.join("plot_data.csv")).unwrap();
    assert_eq!(tidy.lines().next(), Some("series,K,value,stderr"));
    assert_eq!(tidy.lines().count(), 1 + 8);
    assert!(tidy.contains("oracle:npr/direct/OT,3,"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(covlab(&["plot-data", empty.path().to_str().unwrap()]).status.code(), Some(2));
}
