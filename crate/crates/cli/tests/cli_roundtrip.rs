//! End-to-end runs of the `qpp` binary on a miniature workload.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_qpp")
}

fn write_config(dir: &Path) -> PathBuf {
    let out_dir = dir.join("run");
    let config = format!(
        r#"
out_dir = "{}"

[workload]
templates = 3
queries_per_template = 6
seed = 101
depth = [3, 6]
joins = [0, 1]
table_rows = [2048, 6144]
columns = [3, 10]
selectivity = [0.2, 0.9]
join_multiplier = [0.4, 1.2]
group_counts = [16, 256]
dop = [1, 3]
modification_prob = 0.4

[simulator]
seed = 7
chunk_rows = 1024
background = [0.0, 0.8]
probe_chunks = 3
noise_scale = 0.05
penalty = {{ cpu = 0.35, mem = 0.25, io = 0.5 }}
util_sens = {{ cpu = 0.5, mem = 0.3, io = 0.6 }}

[model]
hidden = 12
gat_heads = 1

[training]
seed = 1
ocp_epochs = 4
qpp_epochs = 3
batch_size = 32
learning_rate_ocp = 0.03
learning_rate_qpp = 0.01
momentum = 0.9
clip_norm = 5.0
held_out_templates = [2]
"#,
        out_dir.display()
    );
    let path = dir.join("qpp.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("QPP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_round_trip_with_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("run");

    // generate twice: spec bytes identical
    assert_ok(&run(&config, &["generate"]), "generate");
    let specs_a = std::fs::read(out_dir.join("specs.jsonl")).unwrap();
    assert_ok(&run(&config, &["generate"]), "generate again");
    let specs_b = std::fs::read(out_dir.join("specs.jsonl")).unwrap();
    assert_eq!(specs_a, specs_b);

    // manifest exists and carries the config hash
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("generate_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // qpp stage before ocp stage: contract violation, exit code 2
    let premature = run(&config, &["train", "--stage", "qpp"]);
    assert_eq!(premature.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&premature.stderr).contains("probe"));

    // traces in all three modes, twice for byte-identity
    for mode in ["full", "probe", "parallel-label"] {
        assert_ok(&run(&config, &["trace", "--mode", mode]), mode);
    }
    let probe_a = std::fs::read(out_dir.join("traces_probe.jsonl")).unwrap();
    assert_ok(&run(&config, &["trace", "--mode", "probe"]), "probe again");
    let probe_b = std::fs::read(out_dir.join("traces_probe.jsonl")).unwrap();
    assert_eq!(probe_a, probe_b);

    // probe traces respect the configured budget; parallel traces carry labels
    let probe_traces =
        qpp_core::domain::read_traces_jsonl(std::fs::File::open(out_dir.join("traces_probe.jsonl")).unwrap())
            .unwrap();
    assert_eq!(probe_traces.len(), 18);
    for t in &probe_traces {
        assert_eq!(t.probe_budget, Some(3));
        assert!(t.chunks.len() <= 3, "probe kept {} chunks", t.chunks.len());
        assert!(t.total_latency.unwrap() > 0.0);
        assert_eq!(qpp_core::domain::validate_trace(t), vec![]);
    }
    let parallel_traces = qpp_core::domain::read_traces_jsonl(
        std::fs::File::open(out_dir.join("traces_parallel.jsonl")).unwrap(),
    )
    .unwrap();
    assert!(parallel_traces.iter().all(|t| t.total_latency.unwrap() > 0.0));

    // stage ordering violation: qpp before ocp exists
    let missing_ocp = run(&config, &["train", "--stage", "qpp"]);
    assert_eq!(missing_ocp.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_ocp.stderr).contains("stage ordering"));

    // staged training
    assert_ok(&run(&config, &["train", "--stage", "ocp"]), "train ocp");
    assert_ok(&run(&config, &["train", "--stage", "qpp"]), "train qpp");
    let bundle_a = std::fs::read(out_dir.join("bundle.ckpt")).unwrap();
    assert_ok(&run(&config, &["train", "--stage", "qpp"]), "train qpp again");
    let bundle_b = std::fs::read(out_dir.join("bundle.ckpt")).unwrap();
    assert_eq!(bundle_a, bundle_b);

    // evaluation with robustness table
    assert_ok(&run(&config, &["eval", "--sigmas", "0,1.0"]), "eval");
    let csv_a = std::fs::read(out_dir.join("eval_per_query.csv")).unwrap();
    let summary = std::fs::read_to_string(out_dir.join("eval_summary.md")).unwrap();
    assert!(summary.contains("| model |"));
    let robustness = std::fs::read_to_string(out_dir.join("robustness.md")).unwrap();
    assert!(robustness.contains("true card"));
    assert_ok(&run(&config, &["eval", "--sigmas", "0,1.0"]), "eval again");
    let csv_b = std::fs::read(out_dir.join("eval_per_query.csv")).unwrap();
    assert_eq!(csv_a, csv_b);

    // report re-renders the summary from the CSV alone
    let report = run(
        &config,
        &["report", "--per-query", out_dir.join("eval_per_query.csv").to_str().unwrap()],
    );
    assert_ok(&report, "report");
    assert!(String::from_utf8_lossy(&report.stdout).contains("| model |"));
}

#[test]
fn ablation_flags_are_recorded_in_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("run");

    assert_ok(&run(&config, &["generate"]), "generate");
    assert_ok(&run(&config, &["trace", "--mode", "probe"]), "probe");
    // no-ocp + no-res-attn works without a stage-1 checkpoint
    assert_ok(
        &run(&config, &["train", "--stage", "qpp", "--no-ocp", "--no-res-attn"]),
        "train ablated",
    );
    let bundle = qpp_core::models::ModelBundle::load(&out_dir.join("bundle.ckpt")).unwrap();
    assert!(bundle.flags.no_ocp);
    assert!(bundle.flags.no_res_attn);
    assert!(bundle.ocp.is_none());
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let text = std::fs::read_to_string(&config).unwrap();
    let broken = text.replace("seed = 101\n", "");
    std::fs::write(&config, broken).unwrap();
    let out = run(&config, &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("run");
    assert_ok(&run(&config, &["generate"]), "generate");
    assert_ok(&run(&config, &["trace", "--mode", "probe"]), "probe");

    std::fs::write(out_dir.join("bundle.ckpt"), b"not a checkpoint").unwrap();
    let out = run(&config, &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn out_dir_env_override_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let other = dir.path().join("elsewhere");
    let out = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("generate")
        .env("QPP_OUT_DIR", &other)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(other.join("specs.jsonl").exists());
}
