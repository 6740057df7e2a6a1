//! Feature encoding and cost normalization statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    CostVector, OperatorInstance, ParamValue, ResourceUtilization, COST_COMPONENTS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub name: String,
    /// Known values in sorted order; encoding appends one reserved slot for
    /// unseen values.
    pub values: Vec<String>,
}

/// Fitted feature layout: fixed numeric slots (z-scored) followed by
/// one-hot blocks per categorical feature.
///
/// Numeric slots are the three utilization components, `input_rows`,
/// `input_cols`, and one slot per numeric calling parameter observed during
/// fitting (missing parameters encode as raw 0). Categorical features are
/// the vectorization flag plus every categorical calling parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub numeric: Vec<NumericStat>,
    pub categorical: Vec<CategoricalVocab>,
}

const FIXED_NUMERIC: [&str; 6] =
    ["util_cpu", "util_mem", "util_io", "input_rows", "input_rows_log", "input_cols"];

fn numeric_raw(inst: &OperatorInstance, util: &ResourceUtilization, name: &str) -> f64 {
    match name {
        "util_cpu" => util.cpu,
        "util_mem" => util.mem,
        "util_io" => util.io,
        "input_rows" => inst.input_rows as f64,
        // cardinalities are long-tailed; the log view keeps the encoding
        // responsive when they are off by multiplicative factors
        "input_rows_log" => (1.0 + inst.input_rows as f64).ln(),
        "input_cols" => f64::from(inst.input_cols),
        _ => name
            .strip_prefix("param:")
            .and_then(|p| inst.numeric_param(p))
            .unwrap_or(0.0),
    }
}

fn categorical_raw(inst: &OperatorInstance, name: &str) -> String {
    match name {
        "simd" => inst.op_type.simd().to_string(),
        _ => name
            .strip_prefix("param:")
            .and_then(|p| {
                inst.params.iter().find_map(|q| match (&q.value, q.name == p) {
                    (ParamValue::Categorical(v), true) => Some(v.clone()),
                    _ => None,
                })
            })
            .unwrap_or_default(),
    }
}

impl FeatureEncoder {
    /// Fit normalization statistics and categorical vocabularies over
    /// training samples.
    pub fn fit<'a, I>(samples: I) -> Result<FeatureEncoder>
    where
        I: Iterator<Item = (&'a OperatorInstance, &'a ResourceUtilization)> + Clone,
    {
        let mut numeric_names: Vec<String> = FIXED_NUMERIC.iter().map(|s| s.to_string()).collect();
        let mut categorical_names: Vec<String> = vec!["simd".to_string()];
        let mut extra_numeric = BTreeMap::new();
        let mut vocab: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut count = 0usize;

        for (inst, _) in samples.clone() {
            count += 1;
            for p in &inst.params {
                match &p.value {
                    ParamValue::Numeric(_) => {
                        extra_numeric.insert(format!("param:{}", p.name), ());
                    }
                    ParamValue::Categorical(v) => {
                        let e = vocab.entry(format!("param:{}", p.name)).or_default();
                        if !e.contains(v) {
                            e.push(v.clone());
                        }
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::NotFitted("no samples to fit the feature encoder".to_string()));
        }
        numeric_names.extend(extra_numeric.into_keys());
        categorical_names.extend(vocab.keys().cloned());

        let mut numeric = Vec::with_capacity(numeric_names.len());
        for name in &numeric_names {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for (inst, util) in samples.clone() {
                let v = numeric_raw(inst, util, name);
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / count as f64;
            let var = (sum_sq / count as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            // zero-variance features get unit scale
            let std = if std < 1e-12 { 1.0 } else { std };
            numeric.push(NumericStat { name: name.clone(), mean, std });
        }

        let mut categorical = Vec::with_capacity(categorical_names.len());
        for name in &categorical_names {
            let mut values: Vec<String> = if name == "simd" {
                vec!["false".to_string(), "true".to_string()]
            } else {
                vocab.get(name).cloned().unwrap_or_default()
            };
            values.sort();
            values.dedup();
            categorical.push(CategoricalVocab { name: name.clone(), values });
        }

        Ok(FeatureEncoder { numeric, categorical })
    }

    /// Encoded feature width.
    pub fn width(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|c| c.values.len() + 1).sum::<usize>()
    }

    /// Encode one operator call: numeric slots z-scored, categorical slots
    /// one-hot with unseen values mapped to the reserved trailing slot.
    pub fn encode(&self, inst: &OperatorInstance, util: &ResourceUtilization) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for stat in &self.numeric {
            let raw = numeric_raw(inst, util, &stat.name);
            out.push((raw - stat.mean) / stat.std);
        }
        for cat in &self.categorical {
            let raw = categorical_raw(inst, &cat.name);
            let hit = cat.values.iter().position(|v| *v == raw);
            for i in 0..cat.values.len() {
                out.push(if hit == Some(i) { 1.0 } else { 0.0 });
            }
            out.push(if hit.is_none() { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Encode one operator call with a fitted encoder.
pub fn encode_operator(
    inst: &OperatorInstance,
    util: &ResourceUtilization,
    encoder: &FeatureEncoder,
) -> Vec<f64> {
    encoder.encode(inst, util)
}

/// Global per-component z-score statistics for cost vectors. Cost targets
/// and calibrator inputs share this scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStats {
    pub mean: [f64; COST_COMPONENTS],
    pub std: [f64; COST_COMPONENTS],
}

impl CostStats {
    pub fn fit<'a, I: Iterator<Item = &'a CostVector>>(costs: I) -> Result<CostStats> {
        let mut sum = [0.0; COST_COMPONENTS];
        let mut sum_sq = [0.0; COST_COMPONENTS];
        let mut count = 0usize;
        for c in costs {
            for (i, v) in c.to_array().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::NotFitted("no cost records to fit statistics".to_string()));
        }
        let mut mean = [0.0; COST_COMPONENTS];
        let mut std = [0.0; COST_COMPONENTS];
        for i in 0..COST_COMPONENTS {
            mean[i] = sum[i] / count as f64;
            let var = (sum_sq[i] / count as f64 - mean[i] * mean[i]).max(0.0);
            std[i] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        }
        Ok(CostStats { mean, std })
    }

    pub fn normalize(&self, cost: &[f64; COST_COMPONENTS]) -> [f64; COST_COMPONENTS] {
        let mut out = [0.0; COST_COMPONENTS];
        for i in 0..COST_COMPONENTS {
            out[i] = (cost[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    pub fn denormalize(&self, norm: &[f64; COST_COMPONENTS]) -> [f64; COST_COMPONENTS] {
        let mut out = [0.0; COST_COMPONENTS];
        for i in 0..COST_COMPONENTS {
            out[i] = norm[i] * self.std[i] + self.mean[i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{OperatorId, OperatorKind, OperatorParam};

    fn sample(kind: OperatorKind, rows: u64, sel: Option<f64>) -> OperatorInstance {
        let mut params = vec![OperatorParam::categorical("compression", "lz4")];
        if let Some(s) = sel {
            params.push(OperatorParam::numeric("selectivity", s));
        }
        OperatorInstance { id: OperatorId(0), op_type: kind, params, input_rows: rows, input_cols: 4 }
    }

    #[test]
    fn numeric_feature_at_training_mean_encodes_to_zero() {
        let util = ResourceUtilization::IDLE;
        let a = sample(OperatorKind::Scan, 100, None);
        let b = sample(OperatorKind::Scan, 300, None);
        let enc = FeatureEncoder::fit([(&a, &util), (&b, &util)].into_iter()).unwrap();
        let mid = sample(OperatorKind::Scan, 200, None);
        let v = enc.encode(&mid, &util);
        let rows_slot = enc.numeric.iter().position(|s| s.name == "input_rows").unwrap();
        assert_eq!(v[rows_slot], 0.0);
    }

    #[test]
    fn known_categorical_sets_exactly_one_hot_bit() {
        let util = ResourceUtilization::IDLE;
        let a = sample(OperatorKind::Scan, 100, None);
        let enc = FeatureEncoder::fit([(&a, &util)].into_iter()).unwrap();
        let v = enc.encode(&a, &util);
        let cat_part = &v[enc.numeric.len()..];
        // two categorical features: simd (2 values + reserved) and
        // param:compression (1 value + reserved)
        assert_eq!(cat_part.len(), 3 + 2);
        assert_eq!(cat_part.iter().filter(|&&x| x == 1.0).count(), 2);
    }

    #[test]
    fn unseen_categorical_maps_to_reserved_slot() {
        let util = ResourceUtilization::IDLE;
        let a = sample(OperatorKind::Scan, 100, None);
        let enc = FeatureEncoder::fit([(&a, &util)].into_iter()).unwrap();
        let mut other = a.clone();
        other.params[0] = OperatorParam::categorical("compression", "zstd");
        let v = enc.encode(&other, &util);
        let comp = enc.categorical.iter().position(|c| c.name == "param:compression").unwrap();
        let mut offset = enc.numeric.len();
        for c in &enc.categorical[..comp] {
            offset += c.values.len() + 1;
        }
        let block = &v[offset..offset + enc.categorical[comp].values.len() + 1];
        assert_eq!(block, &[0.0, 1.0]); // reserved slot set
    }

    #[test]
    fn cost_stats_round_trip() {
        let costs = vec![
            CostVector { elapsed_time: 1.0, cpu_time: 0.5, ..Default::default() },
            CostVector { elapsed_time: 3.0, cpu_time: 1.5, ..Default::default() },
        ];
        let stats = CostStats::fit(costs.iter()).unwrap();
        let a = costs[0].to_array();
        let back = stats.denormalize(&stats.normalize(&a));
        for (x, y) in a.iter().zip(back) {
            assert!((x - y).abs() < 1e-12);
        }
        // zero-variance components got unit scale
        assert_eq!(stats.std[9], 1.0);
    }
}
