//! Manual tuning grid (ignored): prints margins per configuration.
//! Run: cargo test -p qpp-core --test tuning -- --ignored --nocapture

use qpp_core::harness::{evaluate, robustness_suite, train_ocp, train_qpp, NoiseScope, TrainConfig};
use qpp_core::models::ModelDims;
use qpp_core::runner::{self, WorkloadSpec};
use qpp_core::tracesim::{CostGroundTruthModel, ResourceCoeffs, SimulatorConfig, WorkloadTemplate};

struct Variant {
    name: &'static str,
    penalty: ResourceCoeffs,
    chunk_rows: u64,
    dop_hi: u32,
    qpp_epochs: u32,
    lr_qpp: f64,
    fusion_scale: f64, // unused placeholder
}

fn run_variant(v: &Variant, seed: u64) {
    let _ = v.fusion_scale;
    let workload = WorkloadSpec {
        n_templates: 20,
        queries_per_template: 50,
        seed: 2024 + seed,
        bounds: WorkloadTemplate { dop: (1, v.dop_hi), ..WorkloadTemplate::default() },
    };
    let model = CostGroundTruthModel {
        penalty: v.penalty,
        ..CostGroundTruthModel::default_for_catalog()
    };
    let sim = SimulatorConfig { chunk_rows: v.chunk_rows, ..SimulatorConfig::default() };
    let config = TrainConfig {
        qpp_epochs: v.qpp_epochs,
        learning_rate_qpp: v.lr_qpp,
        seed,
        held_out_templates: vec![3, 7, 11, 15],
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let specs = runner::generate_specs(&workload).unwrap();
    let serial = runner::trace_serial(&specs, &model, &sim, workload.seed).unwrap();
    let labeled = runner::trace_probe_labeled(&specs, &model, &sim, workload.seed, 4).unwrap();
    let held_out: Vec<_> = labeled
        .iter()
        .filter(|t| config.held_out_templates.contains(&t.template_id))
        .cloned()
        .collect();

    let dims = ModelDims::default();
    let stage1 = train_ocp(&serial, &dims, &config).unwrap();
    let full = train_qpp(&labeled, &stage1, &dims, &config).unwrap();
    let mut ca = config.clone();
    ca.flags.no_ocp = true;
    let no_ocp = train_qpp(&labeled, &stage1, &dims, &ca).unwrap();
    let mut cb = config.clone();
    cb.flags.no_res_attn = true;
    let no_attn = train_qpp(&labeled, &stage1, &dims, &cb).unwrap();

    let rf = evaluate(&full.bundle, &held_out).unwrap();
    let ro = evaluate(&no_ocp.bundle, &held_out).unwrap();
    let ra = evaluate(&no_attn.bundle, &held_out).unwrap();
    let rob = robustness_suite(
        &full.bundle,
        &held_out,
        &[0.0, 1.0, 1.5],
        workload.seed,
        NoiseScope::AllOperators,
    )
    .unwrap();

    println!(
        "{:<18} seed {}: full {:.3} | no_ocp {:.3} ({:+.1}%) | no_attn {:.3} ({:+.1}%) | const {:.3} worksum {:.3} | rob max {:.1}/{:.1}/{:.1} mean {:.2}/{:.2}/{:.2} | {:.0}s",
        v.name,
        seed,
        rf.model.mean,
        ro.model.mean,
        (ro.model.mean / rf.model.mean - 1.0) * 100.0,
        ra.model.mean,
        (ra.model.mean / rf.model.mean - 1.0) * 100.0,
        rf.baseline_const.mean,
        rf.baseline_ocp.as_ref().unwrap().mean,
        rob[0].aggregates.max,
        rob[1].aggregates.max,
        rob[2].aggregates.max,
        rob[0].aggregates.mean,
        rob[1].aggregates.mean,
        rob[2].aggregates.mean,
        t0.elapsed().as_secs_f64(),
    );
}

#[test]
#[ignore]
fn tuning_grid() {
    let variants = [
        Variant {
            name: "baseline",
            penalty: ResourceCoeffs { cpu: 0.35, mem: 0.25, io: 0.5 },
            chunk_rows: 1024,
            dop_hi: 4,
            qpp_epochs: 25,
            lr_qpp: 0.015,
            fusion_scale: 1.0,
        },
        Variant {
            name: "big-chunks",
            penalty: ResourceCoeffs { cpu: 0.35, mem: 0.25, io: 0.5 },
            chunk_rows: 2048,
            dop_hi: 4,
            qpp_epochs: 25,
            lr_qpp: 0.015,
            fusion_scale: 1.0,
        },
        Variant {
            name: "hot-contention",
            penalty: ResourceCoeffs { cpu: 0.7, mem: 0.5, io: 1.0 },
            chunk_rows: 1024,
            dop_hi: 4,
            qpp_epochs: 25,
            lr_qpp: 0.015,
            fusion_scale: 1.0,
        },
        Variant {
            name: "hot+chunks",
            penalty: ResourceCoeffs { cpu: 0.7, mem: 0.5, io: 1.0 },
            chunk_rows: 2048,
            dop_hi: 4,
            qpp_epochs: 25,
            lr_qpp: 0.015,
            fusion_scale: 1.0,
        },
        Variant {
            name: "hot+chunks+ep30",
            penalty: ResourceCoeffs { cpu: 0.7, mem: 0.5, io: 1.0 },
            chunk_rows: 2048,
            dop_hi: 6,
            qpp_epochs: 30,
            lr_qpp: 0.015,
            fusion_scale: 1.0,
        },
    ];
    for v in &variants {
        for seed in [1u64, 2] {
            run_variant(v, seed);
        }
    }
}
