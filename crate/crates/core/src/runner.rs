//! Batch orchestration: expand a workload into specs and traces.
//!
//! Queries are independent, so tracing fans out across threads; every
//! query's randomness derives from its own id, which keeps outputs
//! byte-identical across runs and thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::QueryTrace;
use crate::tracesim::{
    execute_parallel, execute_probe, execute_serial, generate_workload, CostGroundTruthModel,
    PipelineSpec, SimulatorConfig, WorkloadTemplate,
};
use crate::Result;

/// Workload-level generation settings: how many templates, how many
/// queries each, and the global bounds templates are derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_templates: u64,
    pub queries_per_template: u64,
    pub seed: u64,
    pub bounds: WorkloadTemplate,
}

impl WorkloadSpec {
    pub fn templates(&self) -> Vec<WorkloadTemplate> {
        (0..self.n_templates).map(|id| WorkloadTemplate::derive(id, &self.bounds)).collect()
    }
}

/// Per-query seed: decorrelates queries while staying reproducible.
pub fn query_seed(base: u64, query_id: u64) -> u64 {
    base ^ query_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generate every query of every template, with globally unique query ids.
pub fn generate_specs(workload: &WorkloadSpec) -> Result<Vec<PipelineSpec>> {
    let mut out = Vec::new();
    for template in workload.templates() {
        let mut specs =
            generate_workload(&template, workload.queries_per_template, workload.seed)?;
        for (i, spec) in specs.iter_mut().enumerate() {
            spec.query_id = template.template_id * workload.queries_per_template + i as u64;
        }
        out.append(&mut specs);
    }
    Ok(out)
}

/// Serial full-collection traces for every spec.
pub fn trace_serial(
    specs: &[PipelineSpec],
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<Vec<QueryTrace>> {
    specs
        .par_iter()
        .map(|spec| execute_serial(spec, model, cfg, query_seed(seed, spec.query_id)))
        .collect()
}

/// Parallel labeled traces for every spec.
pub fn trace_parallel(
    specs: &[PipelineSpec],
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<Vec<QueryTrace>> {
    specs
        .par_iter()
        .map(|spec| execute_parallel(spec, model, cfg, query_seed(seed, spec.query_id)))
        .collect()
}

/// Probe traces labeled with the latency of the full parallel run of the
/// same query and seed; this is the training/evaluation input shape.
pub fn trace_probe_labeled(
    specs: &[PipelineSpec],
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
    probe_chunks: u64,
) -> Result<Vec<QueryTrace>> {
    specs
        .par_iter()
        .map(|spec| {
            let qseed = query_seed(seed, spec.query_id);
            let mut probe = execute_probe(spec, model, cfg, qseed, probe_chunks)?;
            let full = execute_parallel(spec, model, cfg, qseed)?;
            probe.total_latency = full.total_latency;
            Ok(probe)
        })
        .collect()
}

/// Unlabeled probe traces.
pub fn trace_probe(
    specs: &[PipelineSpec],
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
    probe_chunks: u64,
) -> Result<Vec<QueryTrace>> {
    specs
        .par_iter()
        .map(|spec| execute_probe(spec, model, cfg, query_seed(seed, spec.query_id), probe_chunks))
        .collect()
}
