//! Shared fixtures for the integration suites.

use qpp_core::domain::QueryTrace;
use qpp_core::harness::TrainConfig;
use qpp_core::models::ModelDims;
use qpp_core::runner::{self, WorkloadSpec};
use qpp_core::tracesim::{CostGroundTruthModel, SimulatorConfig, WorkloadTemplate};

pub struct Dataset {
    pub serial: Vec<QueryTrace>,
    pub probe_labeled: Vec<QueryTrace>,
    pub held_out: Vec<QueryTrace>,
}

pub struct Setup {
    pub workload: WorkloadSpec,
    pub model: CostGroundTruthModel,
    pub sim: SimulatorConfig,
    pub probe_chunks: u64,
    pub held_out_templates: Vec<u64>,
}

impl Setup {
    pub fn small() -> Setup {
        Setup {
            workload: WorkloadSpec {
                n_templates: 4,
                queries_per_template: 12,
                seed: 11,
                bounds: WorkloadTemplate::default(),
            },
            model: CostGroundTruthModel::default_for_catalog(),
            sim: SimulatorConfig::default(),
            probe_chunks: 4,
            held_out_templates: vec![3],
        }
    }

    pub fn build(&self) -> Dataset {
        let specs = runner::generate_specs(&self.workload).expect("generate");
        let serial = runner::trace_serial(&specs, &self.model, &self.sim, self.workload.seed)
            .expect("serial traces");
        let labeled = runner::trace_probe_labeled(
            &specs,
            &self.model,
            &self.sim,
            self.workload.seed,
            self.probe_chunks,
        )
        .expect("probe traces");
        let (held_out, probe_labeled): (Vec<QueryTrace>, Vec<QueryTrace>) = labeled
            .into_iter()
            .partition(|t| self.held_out_templates.contains(&t.template_id));
        Dataset { serial, probe_labeled, held_out }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ocp_epochs: 10,
            qpp_epochs: 6,
            held_out_templates: self.held_out_templates.clone(),
            ..TrainConfig::default()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { hidden: 16, ..ModelDims::default() }
    }
}
