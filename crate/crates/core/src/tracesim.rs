//! Pipeline execution simulator and trace generator.
pub mod background;
pub mod exec;
pub mod generate;
pub mod spec;

pub use background::{snapshot_utilization, BackgroundLoad};
pub use exec::{execute_parallel, execute_probe, execute_serial};
pub use generate::{generate_workload, WorkloadTemplate};
pub use spec::{
    apply_modification, CostGroundTruthModel, ModificationAction, ModificationEvent, PipelineSpec,
    ResourceCoeffs, SimulatorConfig, TypeCost,
};
