//! Per-operator-type cost predictors: one shallow MLP per type mapping
//! encoded runtime features to a normalized 10-component cost vector.
//!
//! Targets are z-scored per type. Cost magnitudes differ by orders of
//! magnitude between types; a shared scale would leave cheap types with
//! almost no gradient signal relative to their own cost.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CostVector, OperatorInstance, ResourceUtilization, COST_COMPONENTS};
use crate::models::encoder::{CostStats, FeatureEncoder};
use crate::models::mlp::MlpParams;
use crate::{Error, Result};

/// Hidden layers per predictor.
pub const OCP_HIDDEN_LAYERS: usize = 3;

/// One MLP plus target statistics per operator type, keyed by type name.
/// Types absent from the training data have no entry and cannot be
/// predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpParams {
    pub models: BTreeMap<String, MlpParams>,
    /// Per-type normalization of the 10 cost components.
    pub stats: BTreeMap<String, CostStats>,
}

impl OcpParams {
    /// Fresh predictors for the given type names, all sharing the encoder's
    /// input width. `stats` must be fitted separately per type.
    pub fn init(
        kinds: &[&str],
        input_width: usize,
        hidden: usize,
        seed: u64,
        stats: BTreeMap<String, CostStats>,
    ) -> OcpParams {
        let mut models = BTreeMap::new();
        for kind in kinds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // one stream per type so adding a type never reshuffles others
            rng.set_stream(0x0C9 ^ kind.bytes().fold(0u64, |h, b| h.wrapping_mul(31) + u64::from(b)));
            let dims = [input_width, hidden, hidden, hidden, COST_COMPONENTS];
            models.insert(kind.to_string(), MlpParams::init(&dims, &mut rng));
        }
        OcpParams { models, stats }
    }

    pub fn model_for(&self, kind_name: &str) -> Result<(&MlpParams, &CostStats)> {
        match (self.models.get(kind_name), self.stats.get(kind_name)) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(Error::NotFitted(format!(
                "no cost predictor for operator type {kind_name}"
            ))),
        }
    }
}

/// Per-type-normalized (z-space) cost prediction for one operator call.
pub fn ocp_predict_normalized(
    inst: &OperatorInstance,
    util: &ResourceUtilization,
    encoder: &FeatureEncoder,
    ocp: &OcpParams,
) -> Result<[f64; COST_COMPONENTS]> {
    let (model, _) = ocp.model_for(inst.op_type.name())?;
    let features = encoder.encode(inst, util);
    let out = model.eval(&features);
    let mut arr = [0.0; COST_COMPONENTS];
    arr.copy_from_slice(&out);
    Ok(arr)
}

/// Physical-unit cost prediction, denormalized per type and clamped at
/// zero.
pub fn ocp_predict(
    inst: &OperatorInstance,
    util: &ResourceUtilization,
    encoder: &FeatureEncoder,
    ocp: &OcpParams,
) -> Result<CostVector> {
    let (_, stats) = ocp.model_for(inst.op_type.name())?;
    let norm = ocp_predict_normalized(inst, util, encoder, ocp)?;
    Ok(CostVector::from_array(&stats.denormalize(&norm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{OperatorId, OperatorKind};

    fn scan(rows: u64) -> OperatorInstance {
        OperatorInstance {
            id: OperatorId(0),
            op_type: OperatorKind::Scan,
            params: vec![],
            input_rows: rows,
            input_cols: 4,
        }
    }

    #[test]
    fn zeroed_final_layer_predicts_the_training_mean() {
        let util = ResourceUtilization::IDLE;
        let inst = scan(100);
        let encoder = FeatureEncoder::fit([(&inst, &util)].into_iter()).unwrap();
        let mean_cost = CostVector {
            elapsed_time: 0.25,
            cpu_time: 0.1,
            cpu_cycles: 500,
            ..Default::default()
        };
        let stats = CostStats::fit([mean_cost].iter()).unwrap();
        let mut ocp = OcpParams::init(
            &["Scan"],
            encoder.width(),
            8,
            1,
            BTreeMap::from([("Scan".to_string(), stats)]),
        );
        // zero the output layer: normalized prediction becomes exactly zero
        let model = ocp.models.get_mut("Scan").unwrap();
        let last = model.layers.last_mut().unwrap();
        last.w.data.iter_mut().for_each(|v| *v = 0.0);
        last.b.data.iter_mut().for_each(|v| *v = 0.0);

        let pred = ocp_predict(&inst, &util, &encoder, &ocp).unwrap();
        assert!((pred.elapsed_time - 0.25).abs() < 1e-12);
        assert_eq!(pred.cpu_cycles, 500);
    }

    #[test]
    fn unknown_operator_type_is_an_error() {
        let util = ResourceUtilization::IDLE;
        let inst = scan(100);
        let encoder = FeatureEncoder::fit([(&inst, &util)].into_iter()).unwrap();
        let ocp = OcpParams::init(&["Filter"], encoder.width(), 8, 1, BTreeMap::new());
        assert!(matches!(
            ocp_predict_normalized(&inst, &util, &encoder, &ocp),
            Err(Error::NotFitted(_))
        ));
    }
}
