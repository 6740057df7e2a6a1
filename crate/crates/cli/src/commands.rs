//! Command implementations. Each command reads its inputs from the output
//! directory, writes deterministic artifacts, and records a manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use qpp_core::domain::{read_traces_jsonl, write_traces_jsonl, QueryTrace};
use qpp_core::harness::{
    evaluate_with_grouping, fit_stats_only, render_robustness_markdown, render_summary_markdown,
    robustness_suite, train_ocp, train_qpp, write_curve_csv, write_per_query_csv, EvalReport,
    NoiseScope, OcpTrainOutput, read_per_query_csv,
};
use qpp_core::models::{AblationFlags, ModelBundle};
use qpp_core::runner;
use qpp_core::tracesim::PipelineSpec;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{TraceMode, TrainStage};

fn specs_path(out: &Path) -> PathBuf {
    out.join("specs.jsonl")
}

fn traces_path(out: &Path, mode: TraceMode) -> PathBuf {
    match mode {
        TraceMode::Full => out.join("traces_full.jsonl"),
        TraceMode::Probe => out.join("traces_probe.jsonl"),
        TraceMode::ParallelLabel => out.join("traces_parallel.jsonl"),
    }
}

fn read_specs(path: &Path) -> anyhow::Result<Vec<PipelineSpec>> {
    let file = File::open(path)
        .with_context(|| format!("missing specs file {} (run `qpp generate`)", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: PipelineSpec = serde_json::from_str(&line)
            .with_context(|| format!("bad spec on line {}", i + 1))?;
        out.push(spec);
    }
    Ok(out)
}

fn write_traces_file(path: &Path, traces: &[QueryTrace]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    write_traces_jsonl(BufWriter::new(file), traces)?;
    Ok(())
}

fn read_traces_file(path: &Path, hint: &str) -> anyhow::Result<Vec<QueryTrace>> {
    let file = File::open(path)
        .with_context(|| format!("missing traces file {} (run `qpp trace --mode {hint}`)", path.display()))?;
    Ok(read_traces_jsonl(BufReader::new(file))?)
}

pub fn generate(config: &RunConfig, config_bytes: &[u8]) -> anyhow::Result<()> {
    let out_dir = config.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let workload = config.workload_spec();
    let specs = runner::generate_specs(&workload)?;

    let path = specs_path(&out_dir);
    let mut w = BufWriter::new(File::create(&path)?);
    for spec in &specs {
        serde_json::to_writer(&mut w, spec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);

    let mut manifest = Manifest::new(
        "generate",
        config_bytes,
        serde_json::json!({
            "workload_seed": config.workload.seed,
            "n_specs": specs.len(),
            "per_query_seed_rule": "simulator_seed xor (query_id * 0x9e3779b97f4a7c15)",
        }),
    );
    manifest.add_output(&path)?;
    manifest.write(&out_dir)?;
    println!("wrote {} specs to {}", specs.len(), path.display());
    Ok(())
}

pub fn trace(config: &RunConfig, config_bytes: &[u8], mode: TraceMode) -> anyhow::Result<()> {
    let out_dir = config.out_dir();
    let specs = read_specs(&specs_path(&out_dir))?;
    let model = config.cost_model();
    let sim = config.simulator_config();
    let seed = config.simulator.seed;

    let traces = match mode {
        TraceMode::Full => runner::trace_serial(&specs, &model, &sim, seed)?,
        TraceMode::Probe => {
            runner::trace_probe_labeled(&specs, &model, &sim, seed, config.simulator.probe_chunks)?
        }
        TraceMode::ParallelLabel => runner::trace_parallel(&specs, &model, &sim, seed)?,
    };

    let path = traces_path(&out_dir, mode);
    write_traces_file(&path, &traces)?;

    let mode_name = match mode {
        TraceMode::Full => "full",
        TraceMode::Probe => "probe",
        TraceMode::ParallelLabel => "parallel-label",
    };
    let mut manifest = Manifest::new(
        &format!("trace_{mode_name}"),
        config_bytes,
        serde_json::json!({ "simulator_seed": seed, "n_traces": traces.len() }),
    );
    manifest.add_output(&path)?;
    manifest.write(&out_dir)?;
    println!("wrote {} traces to {}", traces.len(), path.display());
    Ok(())
}

fn stage1_from_bundle(bundle: ModelBundle) -> anyhow::Result<OcpTrainOutput> {
    let ocp = bundle
        .ocp
        .ok_or_else(|| anyhow::anyhow!("checkpoint has no stage-1 cost predictors"))?;
    Ok(OcpTrainOutput {
        ocp,
        encoder: bundle.encoder,
        cost_stats: bundle.cost_stats,
        curve: Vec::new(),
        skipped_types: Vec::new(),
    })
}

pub fn train(
    config: &RunConfig,
    config_bytes: &[u8],
    stage: TrainStage,
    no_res_attn: bool,
    no_ocp: bool,
) -> anyhow::Result<()> {
    let out_dir = config.out_dir();
    let flags = AblationFlags { no_res_attn, no_ocp };
    let train_config = config.train_config(flags);
    let dims = config.model_dims();

    match stage {
        TrainStage::Ocp => {
            let traces = read_traces_file(&traces_path(&out_dir, TraceMode::Full), "full")?;
            let output = train_ocp(&traces, &dims, &train_config)?;
            if !output.skipped_types.is_empty() {
                eprintln!("warning: no samples for operator types {:?}", output.skipped_types);
            }

            let ckpt = out_dir.join("ocp.ckpt");
            let bundle = ModelBundle {
                version: qpp_core::models::bundle::CHECKPOINT_VERSION,
                dims,
                flags,
                encoder: output.encoder.clone(),
                cost_stats: output.cost_stats.clone(),
                ocp: Some(output.ocp.clone()),
                predictor: None,
                label_stats: None,
            };
            bundle.save(&ckpt)?;
            let curve_path = out_dir.join("ocp_curve.csv");
            let mut w = BufWriter::new(File::create(&curve_path)?);
            write_curve_csv(&mut w, &output.curve)?;
            w.flush()?;

            let mut manifest = Manifest::new(
                "train_ocp",
                config_bytes,
                serde_json::json!({ "training_seed": train_config.seed }),
            );
            manifest.add_output(&ckpt)?;
            manifest.add_output(&curve_path)?;
            manifest.write(&out_dir)?;
            println!("wrote stage-1 checkpoint to {}", ckpt.display());
        }
        TrainStage::Qpp => {
            let traces = read_traces_file(&traces_path(&out_dir, TraceMode::Probe), "probe")?;
            let stage1 = if no_ocp {
                fit_stats_only(&traces, &train_config)?
            } else {
                let ocp_path = out_dir.join("ocp.ckpt");
                if !ocp_path.exists() {
                    bail!(
                        "stage ordering violation: {} not found; run `qpp train --stage ocp` \
                         first or pass --no-ocp",
                        ocp_path.display()
                    );
                }
                stage1_from_bundle(ModelBundle::load(&ocp_path)?)?
            };

            let output = train_qpp(&traces, &stage1, &dims, &train_config)?;
            if output.skipped_queries > 0 {
                eprintln!("warning: skipped {} unusable training queries", output.skipped_queries);
            }

            let ckpt = out_dir.join("bundle.ckpt");
            output.bundle.save(&ckpt)?;
            let curve_path = out_dir.join("qpp_curve.csv");
            let mut w = BufWriter::new(File::create(&curve_path)?);
            write_curve_csv(&mut w, &output.curve)?;
            w.flush()?;

            let mut manifest = Manifest::new(
                "train_qpp",
                config_bytes,
                serde_json::json!({
                    "training_seed": train_config.seed,
                    "no_res_attn": no_res_attn,
                    "no_ocp": no_ocp,
                }),
            );
            manifest.add_output(&ckpt)?;
            manifest.add_output(&curve_path)?;
            manifest.write(&out_dir)?;
            println!("wrote full checkpoint to {}", ckpt.display());
        }
    }
    Ok(())
}

pub fn eval(
    config: &RunConfig,
    config_bytes: &[u8],
    checkpoint: Option<PathBuf>,
    sigmas: &[f64],
    scans_only: bool,
    group_percentiles: &[f64],
) -> anyhow::Result<()> {
    let out_dir = config.out_dir();
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join("bundle.ckpt"));
    let bundle = ModelBundle::load(&ckpt)
        .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;

    let traces = read_traces_file(&traces_path(&out_dir, TraceMode::Probe), "probe")?;
    let held_out: Vec<QueryTrace> = traces
        .into_iter()
        .filter(|t| config.training.held_out_templates.contains(&t.template_id))
        .collect();
    if held_out.is_empty() {
        bail!("no held-out traces; check training.held_out_templates");
    }

    let report = evaluate_with_grouping(&bundle, &held_out, group_percentiles)?;
    let csv_path = out_dir.join("eval_per_query.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    write_per_query_csv(&mut w, &report)?;
    w.flush()?;
    let md_path = out_dir.join("eval_summary.md");
    std::fs::write(&md_path, render_summary_markdown(&report))?;

    let mut manifest = Manifest::new(
        "eval",
        config_bytes,
        serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "queries": report.per_query.len(),
            "noise_seed": config.simulator.seed,
        }),
    );
    manifest.add_output(&csv_path)?;
    manifest.add_output(&md_path)?;

    if !sigmas.is_empty() {
        let scope = if scans_only { NoiseScope::ScansOnly } else { NoiseScope::AllOperators };
        let rows =
            robustness_suite(&bundle, &held_out, sigmas, config.simulator.seed, scope)?;
        let rob_path = out_dir.join("robustness.md");
        std::fs::write(&rob_path, render_robustness_markdown(&rows))?;
        manifest.add_output(&rob_path)?;
        println!("mean Q-Error per sigma:");
        for row in &rows {
            println!("  sigma {:>4}: {:.3}", row.sigma, row.aggregates.mean);
        }
    }

    manifest.write(&out_dir)?;
    println!(
        "evaluated {} held-out queries: mean Q-Error {:.3} (constant baseline {:.3})",
        report.per_query.len(),
        report.model.mean,
        report.baseline_const.mean
    );
    Ok(())
}

pub fn report(per_query: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let rows = read_per_query_csv(
        File::open(per_query)
            .with_context(|| format!("cannot open {}", per_query.display()))?,
    )?;
    let report = EvalReport::from_per_query(rows, &[25.0, 50.0, 75.0])?;
    let md = render_summary_markdown(&report);
    match out {
        Some(path) => {
            std::fs::write(path, md)?;
            println!("wrote {}", path.display());
        }
        None => print!("{md}"),
    }
    Ok(())
}
