//! Behavior of the staged training pipeline at small scale.

mod common;

use common::Setup;
use qpp_core::domain::OperatorKind;
use qpp_core::harness::{evaluate, train_ocp, train_qpp};
use qpp_core::models::ocp_predict;
use qpp_core::models::predict::predict_query;
use qpp_core::tracesim::{CostGroundTruthModel, ResourceCoeffs, SimulatorConfig};

#[test]
fn ocp_training_reduces_loss_and_is_deterministic() {
    let setup = Setup::small();
    let data = setup.build();
    let config = setup.train_config();

    let a = train_ocp(&data.serial, &setup.dims(), &config).unwrap();
    assert!(
        a.curve.last().unwrap().train_loss < a.curve.first().unwrap().train_loss,
        "loss did not decrease: {:?}",
        a.curve
    );
    assert!(a.skipped_types.is_empty() || a.skipped_types.iter().all(|k| k == "MergeJoin"));

    let b = train_ocp(&data.serial, &setup.dims(), &config).unwrap();
    assert_eq!(a.ocp, b.ocp);
    assert_eq!(a.encoder, b.encoder);
}

#[test]
fn ocp_training_requires_traces() {
    let setup = Setup::small();
    assert!(train_ocp(&[], &setup.dims(), &setup.train_config()).is_err());
}

/// Noise-free simulator with an exactly linear elapsed-time model: the
/// predictors should pin each held-out operator call's cost closely. A
/// call's measured cost is the mean over its chunks, matching the
/// instance-level cardinality feature the predictor sees. Held-out calls
/// are fresh queries of known templates; template shift is a query-level
/// concern, not a per-operator one.
#[test]
fn ocp_learns_a_noise_free_linear_cost_model() {
    let mut setup = Setup::small();
    let mut model = CostGroundTruthModel {
        noise_scale: 0.0,
        util_sens: ResourceCoeffs::ZERO,
        ..CostGroundTruthModel::default_for_catalog()
    };
    for tc in model.per_type.values_mut() {
        tc.per_cell_s = 0.0; // cost strictly linear in rows
    }
    setup.model = model;
    setup.sim = SimulatorConfig { background_low: 0.0, background_high: 0.0, ..setup.sim };
    setup.held_out_templates = Vec::new();
    let data = setup.build();
    let mut config = setup.train_config();
    config.held_out_templates = Vec::new();
    config.ocp_epochs = 50;

    let out = train_ocp(&data.serial, &setup.dims(), &config).unwrap();

    // fresh queries of the same templates, never seen in training
    let mut fresh = setup.workload.clone();
    fresh.seed = setup.workload.seed + 1000;
    let specs = qpp_core::runner::generate_specs(&fresh).unwrap();
    let eval_traces =
        qpp_core::runner::trace_probe_labeled(&specs[..20], &setup.model, &setup.sim, fresh.seed, 4)
            .unwrap();

    let mut checked = 0;
    let mut failures = Vec::new();
    for trace in &eval_traces {
        for (op, obs) in &trace.operators {
            if out.skipped_types.contains(&obs.instance.op_type.name().to_string()) {
                continue;
            }
            let measured: Vec<f64> = trace
                .records
                .values()
                .filter(|r| r.operator_id == *op)
                .map(|r| r.cost.cpu_time) // contention-free component
                .collect();
            if measured.is_empty() {
                continue;
            }
            let truth = measured.iter().sum::<f64>() / measured.len() as f64;
            if truth < 1e-6 {
                continue;
            }
            let pred =
                ocp_predict(&obs.instance, &obs.utilization, &out.encoder, &out.ocp).unwrap();
            checked += 1;
            let rel = (pred.cpu_time - truth).abs() / truth;
            if rel > 0.10 {
                failures.push((obs.instance.op_type, rel));
            }
        }
    }
    assert!(checked > 40, "too few comparable operator calls: {checked}");
    let failure_share = failures.len() as f64 / checked as f64;
    assert!(
        failure_share < 0.10,
        "{} of {} held-out calls off by >10%: {:?}",
        failures.len(),
        checked,
        &failures[..failures.len().min(8)]
    );
}

#[test]
fn qpp_training_reduces_loss_and_is_deterministic() {
    let setup = Setup::small();
    let data = setup.build();
    let config = setup.train_config();

    let stage1 = train_ocp(&data.serial, &setup.dims(), &config).unwrap();
    let a = train_qpp(&data.probe_labeled, &stage1, &setup.dims(), &config).unwrap();
    assert!(
        a.curve.last().unwrap().train_loss < a.curve.first().unwrap().train_loss,
        "loss did not decrease: {:?}",
        a.curve
    );
    assert_eq!(a.skipped_queries, 0);

    let b = train_qpp(&data.probe_labeled, &stage1, &setup.dims(), &config).unwrap();
    assert_eq!(a.bundle, b.bundle);

    // checkpoints serialize byte-identically
    let mut bytes_a = Vec::new();
    let mut bytes_b = Vec::new();
    a.bundle.write(&mut bytes_a).unwrap();
    b.bundle.write(&mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn qpp_training_without_labels_is_an_error() {
    let setup = Setup::small();
    let data = setup.build();
    let config = setup.train_config();
    let stage1 = train_ocp(&data.serial, &setup.dims(), &config).unwrap();

    let mut unlabeled = data.probe_labeled.clone();
    for t in &mut unlabeled {
        t.total_latency = None;
    }
    assert!(train_qpp(&unlabeled, &stage1, &setup.dims(), &config).is_err());
}

#[test]
fn qpp_without_stage1_models_requires_the_ablation_flag() {
    let setup = Setup::small();
    let data = setup.build();
    let mut config = setup.train_config();
    let stage1 = train_ocp(&data.serial, &setup.dims(), &config).unwrap();

    config.flags.no_ocp = true;
    let out = train_qpp(&data.probe_labeled, &stage1, &setup.dims(), &config).unwrap();
    assert!(out.bundle.ocp.is_none());
    assert_eq!(out.bundle.dims.cost_width, out.bundle.dims.vertex_width);
    // evaluation still works, with no work-sum baseline
    let report = evaluate(&out.bundle, &data.held_out).unwrap();
    assert!(report.baseline_ocp.is_none());
}

/// Poisoned held-out traces must not influence training at all.
#[test]
fn training_never_reads_held_out_templates() {
    let setup = Setup::small();
    let data = setup.build();
    let config = setup.train_config();

    let stage1_clean = train_ocp(&data.serial, &setup.dims(), &config).unwrap();
    let qpp_clean = train_qpp(&data.probe_labeled, &stage1_clean, &setup.dims(), &config).unwrap();

    // poison every held-out trace with absurd values
    let mut poisoned_serial = data.serial.clone();
    for t in &mut poisoned_serial {
        if config.is_held_out(t.template_id) {
            for rec in t.records.values_mut() {
                rec.cost.elapsed_time *= 1e6;
                rec.cost.cpu_time *= 1e6;
            }
        }
    }
    let mut poisoned_probe = data.probe_labeled.clone();
    let mut held = data.held_out.clone();
    for t in &mut held {
        t.total_latency = Some(9e9);
    }
    poisoned_probe.extend(held);

    let stage1_poisoned = train_ocp(&poisoned_serial, &setup.dims(), &config).unwrap();
    let qpp_poisoned =
        train_qpp(&poisoned_probe, &stage1_poisoned, &setup.dims(), &config).unwrap();

    assert_eq!(stage1_clean.ocp, stage1_poisoned.ocp);
    assert_eq!(stage1_clean.cost_stats, stage1_poisoned.cost_stats);
    assert_eq!(qpp_clean.bundle, qpp_poisoned.bundle);
}

#[test]
fn evaluation_report_is_complete_and_reproducible() {
    let setup = Setup::small();
    let data = setup.build();
    let config = setup.train_config();
    let stage1 = train_ocp(&data.serial, &setup.dims(), &config).unwrap();
    let out = train_qpp(&data.probe_labeled, &stage1, &setup.dims(), &config).unwrap();

    let report = evaluate(&out.bundle, &data.held_out).unwrap();
    assert_eq!(report.per_query.len(), data.held_out.len());
    assert!(report.model.mean >= 1.0);
    assert!(report.baseline_ocp.is_some());
    assert_eq!(report.groups.iter().map(|g| g.count).sum::<usize>(), data.held_out.len());

    let again = evaluate(&out.bundle, &data.held_out).unwrap();
    assert_eq!(report, again);

    // per-query predictions agree with the public single-query entry point
    for q in report.per_query.iter().take(5) {
        let trace = data.held_out.iter().find(|t| t.query_id == q.query_id).unwrap();
        let p = predict_query(trace, &out.bundle).unwrap();
        assert!((p - q.predicted).abs() < 1e-12);
    }

    assert!(evaluate(&out.bundle, &[]).is_err());
}

#[test]
fn every_catalog_type_appears_in_a_modest_workload() {
    // guards the generator against silently dropping operator kinds
    let setup = Setup::small();
    let data = setup.build();
    let mut seen = std::collections::BTreeSet::new();
    for t in &data.serial {
        for o in t.operators.values() {
            seen.insert(o.instance.op_type);
        }
    }
    for kind in OperatorKind::CATALOG {
        assert!(seen.contains(&kind), "{kind} never generated");
    }
}
