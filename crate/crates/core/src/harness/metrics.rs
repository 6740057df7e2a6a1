//! The Q-Error metric and its aggregates.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Multiplicative prediction error: `max(p, a) / min(p, a)`, always >= 1.
/// Symmetric in its arguments and invariant under common rescaling.
pub fn q_error(prediction: f64, actual: f64) -> Result<f64> {
    if !(prediction > 0.0) || !(actual > 0.0) {
        return Err(Error::Config(format!(
            "q_error needs positive inputs, got prediction={prediction}, actual={actual}"
        )));
    }
    Ok(prediction.max(actual) / prediction.min(actual))
}

/// Nearest-rank percentile of a sorted ascending slice: the value at rank
/// `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Mean and tail percentiles of a Q-Error sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Aggregates {
    pub fn from_values(values: &[f64]) -> Result<Aggregates> {
        if values.is_empty() {
            return Err(Error::Config("no values to aggregate".to_string()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite Q-Errors"));
        Ok(Aggregates {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: nearest_rank(&sorted, 50.0),
            p90: nearest_rank(&sorted, 90.0),
            p95: nearest_rank(&sorted, 95.0),
            p99: nearest_rank(&sorted, 99.0),
            max: *sorted.last().unwrap(),
        })
    }
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: u64,
    pub template_id: u64,
    pub actual: f64,
    pub predicted: f64,
    pub q_error: f64,
    /// Constant-median baseline prediction.
    pub baseline_const: f64,
    /// Work-sum baseline prediction (sum of predicted uncontended elapsed
    /// times); absent when cost predictors are ablated.
    pub baseline_ocp: Option<f64>,
}

/// Q-Error statistics within one actual-latency range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyGroup {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub mean_q_error: f64,
}

/// Full evaluation outcome. Aggregates are always recomputable from
/// `per_query`; [`EvalReport::from_per_query`] is the single construction
/// path that guarantees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: Vec<QueryEval>,
    pub model: Aggregates,
    pub baseline_const: Aggregates,
    pub baseline_ocp: Option<Aggregates>,
    pub groups: Vec<LatencyGroup>,
}

impl EvalReport {
    /// Aggregate a per-query list. `group_percentiles` are the latency
    /// percentiles cutting the groups (quartiles by default).
    pub fn from_per_query(per_query: Vec<QueryEval>, group_percentiles: &[f64]) -> Result<EvalReport> {
        if per_query.is_empty() {
            return Err(Error::Config("evaluation set is empty".to_string()));
        }
        let model = Aggregates::from_values(
            &per_query.iter().map(|q| q.q_error).collect::<Vec<_>>(),
        )?;
        let const_errors: Result<Vec<f64>> =
            per_query.iter().map(|q| q_error(q.baseline_const, q.actual)).collect();
        let baseline_const = Aggregates::from_values(&const_errors?)?;
        let baseline_ocp = if per_query.iter().all(|q| q.baseline_ocp.is_some()) {
            let errs: Result<Vec<f64>> = per_query
                .iter()
                .map(|q| q_error(q.baseline_ocp.unwrap(), q.actual))
                .collect();
            Some(Aggregates::from_values(&errs?)?)
        } else {
            None
        };

        let mut actuals: Vec<f64> = per_query.iter().map(|q| q.actual).collect();
        actuals.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        let mut edges: Vec<f64> =
            group_percentiles.iter().map(|&p| nearest_rank(&actuals, p)).collect();
        edges.dedup_by(|a, b| a == b);
        let mut groups = Vec::new();
        let mut low = 0.0;
        for (i, &edge) in edges.iter().chain([f64::INFINITY].iter()).enumerate() {
            let members: Vec<&QueryEval> = per_query
                .iter()
                .filter(|q| q.actual > low && (q.actual <= edge || i == edges.len()))
                .collect();
            if !members.is_empty() {
                groups.push(LatencyGroup {
                    low,
                    high: edge,
                    count: members.len(),
                    mean_q_error: members.iter().map(|q| q.q_error).sum::<f64>()
                        / members.len() as f64,
                });
            }
            low = edge;
        }
        Ok(EvalReport { per_query, model, baseline_const, baseline_ocp, groups })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_error_basic_values() {
        assert_eq!(q_error(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(q_error(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(q_error(0.5, 2.0).unwrap(), 4.0);
    }

    #[test]
    fn q_error_rejects_non_positive_inputs() {
        assert!(q_error(0.0, 1.0).is_err());
        assert!(q_error(1.0, -2.0).is_err());
        assert!(q_error(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn q_error_is_symmetric_and_scale_invariant() {
        let cases = [(0.3, 1.7), (2.0, 2.0), (0.01, 90.0), (5.5, 4.0)];
        for (p, a) in cases {
            let pq = q_error(p, a).unwrap();
            assert_eq!(pq, q_error(a, p).unwrap());
            for k in [0.1, 3.0, 1e4] {
                assert!((q_error(k * p, k * a).unwrap() - pq).abs() < 1e-12 * pq);
            }
            assert!(pq >= 1.0);
        }
    }

    #[test]
    fn nearest_rank_percentiles_match_hand_computation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(nearest_rank(&v, 50.0), 5.0); // ceil(0.5*10)=5
        assert_eq!(nearest_rank(&v, 90.0), 9.0);
        assert_eq!(nearest_rank(&v, 95.0), 10.0); // ceil(9.5)=10
        assert_eq!(nearest_rank(&v, 99.0), 10.0);
        let single = [42.0];
        assert_eq!(nearest_rank(&single, 50.0), 42.0);
    }

    fn eval_row(id: u64, actual: f64, predicted: f64) -> QueryEval {
        QueryEval {
            query_id: id,
            template_id: 0,
            actual,
            predicted,
            q_error: q_error(predicted, actual).unwrap(),
            baseline_const: 1.0,
            baseline_ocp: None,
        }
    }

    #[test]
    fn perfect_predictor_has_unit_aggregates() {
        let rows: Vec<QueryEval> = (0..10).map(|i| eval_row(i, 2.0 + i as f64, 2.0 + i as f64)).collect();
        let report = EvalReport::from_per_query(rows, &[25.0, 50.0, 75.0]).unwrap();
        assert_eq!(report.model.mean, 1.0);
        assert_eq!(report.model.max, 1.0);
    }

    #[test]
    fn aggregates_are_recomputable_from_the_per_query_list() {
        let rows: Vec<QueryEval> =
            (0..37).map(|i| eval_row(i, 1.0 + i as f64, 2.0 + (i % 5) as f64)).collect();
        let report = EvalReport::from_per_query(rows.clone(), &[25.0, 50.0, 75.0]).unwrap();
        let again = EvalReport::from_per_query(report.per_query.clone(), &[25.0, 50.0, 75.0]).unwrap();
        assert_eq!(report.model, again.model);
        assert_eq!(report.groups, again.groups);
        assert_eq!(report.groups.iter().map(|g| g.count).sum::<usize>(), rows.len());
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(EvalReport::from_per_query(Vec::new(), &[50.0]).is_err());
    }
}
