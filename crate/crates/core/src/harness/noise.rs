//! Cardinality-noise robustness protocol.
//!
//! Estimation error is simulated by multiplying true cardinalities with a
//! log-normal factor (`ln f ~ Normal(0, sigma^2)`): the resulting factor
//! distribution is already symmetric in log space and long-tailed, like
//! real estimator error. Labels stay untouched; only model inputs degrade.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::QueryTrace;
use crate::harness::eval::evaluate;
use crate::harness::metrics::Aggregates;
use crate::models::bundle::ModelBundle;
use crate::{Error, Result};

/// Which operators receive perturbed cardinalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseScope {
    /// Every operator's input rows (default).
    AllOperators,
    /// Only table scans.
    ScansOnly,
}

/// Multiply operator cardinalities by seeded log-normal factors.
/// `sigma = 0` returns the traces unchanged.
pub fn inject_cardinality_noise(
    traces: &[QueryTrace],
    sigma: f64,
    seed: u64,
    scope: NoiseScope,
) -> Vec<QueryTrace> {
    if sigma == 0.0 {
        return traces.to_vec();
    }
    traces
        .iter()
        .map(|trace| {
            let mut out = trace.clone();
            for (id, obs) in out.operators.iter_mut() {
                if scope == NoiseScope::ScansOnly
                    && obs.instance.op_type != crate::domain::OperatorKind::Scan
                {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((trace.query_id << 24) ^ id.0);
                let z: f64 = rng.sample(StandardNormal);
                let factor = (sigma * z).exp();
                obs.instance.input_rows =
                    (obs.instance.input_rows as f64 * factor).round() as u64;
            }
            out
        })
        .collect()
}

/// One robustness table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub aggregates: Aggregates,
}

/// Evaluate the bundle once per noise level; labels never change, so rows
/// are directly comparable.
pub fn robustness_suite(
    bundle: &ModelBundle,
    traces: &[QueryTrace],
    sigmas: &[f64],
    seed: u64,
    scope: NoiseScope,
) -> Result<Vec<RobustnessRow>> {
    if sigmas.is_empty() {
        return Err(Error::Config("robustness suite needs at least one sigma".to_string()));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let noisy = inject_cardinality_noise(traces, sigma, seed, scope);
            let report = evaluate(bundle, &noisy)?;
            Ok(RobustnessRow { sigma, aggregates: report.model })
        })
        .collect()
}
