//! Held-out evaluation with built-in naive baselines.

use rayon::prelude::*;

use crate::domain::QueryTrace;
use crate::harness::metrics::{q_error, EvalReport, QueryEval};
use crate::models::bundle::ModelBundle;
use crate::models::predict::{build_query_inputs, qpp_forward, PredictorTensors};
use crate::{Error, Result};

/// Default latency-range grouping: quartiles of the actual latencies.
pub const DEFAULT_GROUP_PERCENTILES: [f64; 3] = [25.0, 50.0, 75.0];

fn evaluate_one(trace: &QueryTrace, bundle: &ModelBundle) -> Result<QueryEval> {
    let (predictor, label_stats) = bundle.require_predictor()?;
    let actual = trace.total_latency.ok_or_else(|| {
        Error::InvalidTrace(format!("query {} has no latency label", trace.query_id))
    })?;
    let ocp = if bundle.flags.no_ocp { None } else { Some(bundle.require_ocp()?) };
    let inputs =
        build_query_inputs(trace, &bundle.encoder, &bundle.cost_stats, ocp, bundle.flags)?;
    let tensors = PredictorTensors::from_params(predictor, false);
    let predicted = label_stats.denormalize(qpp_forward(&tensors, &inputs, bundle.flags)?.item()?);
    Ok(QueryEval {
        query_id: trace.query_id,
        template_id: trace.template_id,
        actual,
        predicted,
        q_error: q_error(predicted, actual)?,
        baseline_const: label_stats.median_secs,
        baseline_ocp: inputs.ocp_elapsed_sum,
    })
}

/// Evaluate a fitted bundle on labeled traces, grouping Q-Errors by the
/// given percentiles of actual latency.
pub fn evaluate_with_grouping(
    bundle: &ModelBundle,
    traces: &[QueryTrace],
    group_percentiles: &[f64],
) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::Config("evaluation set is empty".to_string()));
    }
    bundle.require_predictor()?;
    let per_query: Result<Vec<QueryEval>> = traces
        .par_iter()
        .map(|trace| evaluate_one(trace, bundle))
        .collect();
    EvalReport::from_per_query(per_query?, group_percentiles)
}

/// Evaluate with quartile latency grouping.
pub fn evaluate(bundle: &ModelBundle, traces: &[QueryTrace]) -> Result<EvalReport> {
    evaluate_with_grouping(bundle, traces, &DEFAULT_GROUP_PERCENTILES)
}
