//! Staged training, evaluation metrics, ablations, and the
//! cardinality-noise robustness protocol.

pub mod eval;
pub mod metrics;
pub mod noise;
pub mod report;
pub mod train;

pub use eval::{evaluate, evaluate_with_grouping};
pub use metrics::{q_error, Aggregates, EvalReport, LatencyGroup, QueryEval};
pub use noise::{inject_cardinality_noise, robustness_suite, NoiseScope, RobustnessRow};
pub use report::{
    read_per_query_csv, render_robustness_markdown, render_summary_markdown, write_curve_csv,
    write_per_query_csv, CurvePoint,
};
pub use train::{fit_stats_only, train_ocp, train_qpp, OcpTrainOutput, QppTrainOutput, TrainConfig};
