//! Whole-query latency prediction: compose path orientation, tree
//! construction, cost attachment, contention fusion, graph attention, and
//! tree convolution into one differentiable forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contention::{
    attention_adjust, build_meta_matrices, expand_to_pipeline, fuse_pipeline, FusionWeights,
};
use crate::dataflow::{attach_costs, tree_from_trace};
use crate::domain::{CostVector, OperatorId, OperatorKind, QueryTrace};
use crate::models::bundle::{MapperParams, ModelBundle, PredictorParams};
use crate::models::encoder::{CostStats, FeatureEncoder};
use crate::models::gat::{gat_forward, GatParams, GatTensors};
use crate::models::mlp::MatrixData;
use crate::models::ocp::{ocp_predict, OcpParams};
use crate::models::tcn::{child_coefficient_matrices, tcn_forward, TcnParams, TcnTensors};
use crate::models::{AblationFlags, ModelDims};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Everything the query-level forward pass needs, precomputed once per
/// trace. All matrices are in the canonical BFS order of the data-flow
/// tree (root first, children sorted by operator id), which makes the
/// prediction independent of chunk ordering in the trace.
#[derive(Debug, Clone)]
pub struct QueryInputs {
    pub n: usize,
    /// `[N, cost_width]` cost-mapper input (normalized predicted costs, or
    /// a copy of the vertex features when the cost predictors are ablated).
    pub cost_rows: MatrixData,
    /// `[N, vertex_width]` encoded vertex features.
    pub vertex_rows: MatrixData,
    pub adjacency: MatrixData,
    /// Expanded competition matrices `[cpu, mem, io]`.
    pub competition: [MatrixData; 3],
    /// 0/1 neighborhood mask: self-loops plus the symmetrized union of
    /// adjacency and competition structure.
    pub mask: MatrixData,
    pub tcn_left: MatrixData,
    pub tcn_right: MatrixData,
    /// BFS index of the tree root.
    pub root: usize,
    /// Ground-truth latency if the trace was labeled.
    pub actual_latency: Option<f64>,
    /// Normalized training label (set by the trainer).
    pub label_norm: Option<f64>,
    /// Sum over nodes of predicted uncontended elapsed time times
    /// multiplicity; the work-sum naive baseline. Absent without cost
    /// predictors.
    pub ocp_elapsed_sum: Option<f64>,
}

/// Vertex feature width for a fitted encoder: encoded features plus
/// log-multiplicity plus the operator-type one-hot block.
pub fn vertex_width(encoder: &FeatureEncoder) -> usize {
    encoder.width() + 1 + OperatorKind::CATALOG.len()
}

/// Build the forward-pass inputs for one trace.
pub fn build_query_inputs(
    trace: &QueryTrace,
    encoder: &FeatureEncoder,
    cost_stats: &CostStats,
    ocp: Option<&OcpParams>,
    flags: AblationFlags,
) -> Result<QueryInputs> {
    let tree = tree_from_trace(trace)?.canonicalized();
    let n = tree.len();

    let mut vertex_rows = Vec::with_capacity(n);
    for node in tree.nodes_bfs() {
        let obs = trace.operators.get(&node.operator_id).ok_or_else(|| {
            Error::InvalidTrace(format!("operator {} missing from trace", node.operator_id))
        })?;
        let mut features = encoder.encode(&obs.instance, &obs.utilization);
        features.push((1.0 + node.multiplicity as f64).ln());
        for kind in OperatorKind::CATALOG {
            features.push(if kind == node.op_type { 1.0 } else { 0.0 });
        }
        vertex_rows.push(features);
    }
    let vw = vertex_rows[0].len();
    let vertex_rows = MatrixData {
        rows: n,
        cols: vw,
        data: vertex_rows.into_iter().flatten().collect(),
    };

    let (cost_rows, ocp_elapsed_sum) = if flags.no_ocp {
        (vertex_rows.clone(), None)
    } else {
        let ocp = ocp.ok_or_else(|| {
            Error::NotFitted("cost predictors required unless ablated".to_string())
        })?;
        // Predict each node's cost, then attach through the per-chunk map
        // exactly like measured costs would be.
        let mut predicted: BTreeMap<(OperatorId, u64), CostVector> = BTreeMap::new();
        let mut per_node_pred: Vec<CostVector> = Vec::with_capacity(n);
        for node in tree.nodes_bfs() {
            let obs = &trace.operators[&node.operator_id];
            let pred = ocp_predict(&obs.instance, &obs.utilization, encoder, ocp)?;
            per_node_pred.push(pred);
            for &path_idx in &node.path_refs {
                if let Some(chunk) = trace.chunks.get(path_idx) {
                    predicted.insert((node.operator_id, chunk.chunk_id), pred);
                }
            }
        }
        let attached = attach_costs(&tree, trace, &predicted)?;
        let mut data = Vec::with_capacity(n * 10);
        for cost in &attached {
            data.extend(cost_stats.normalize(&cost.to_array()));
        }
        let sum = tree
            .nodes_bfs()
            .zip(&per_node_pred)
            .map(|(node, pred)| pred.elapsed_time * node.multiplicity as f64)
            .sum::<f64>();
        (MatrixData { rows: n, cols: 10, data }, Some(sum))
    };

    let adjacency = MatrixData { rows: n, cols: n, data: tree.to_adjacency().to_vec() };
    let meta = build_meta_matrices(&OperatorKind::CATALOG);
    let (cpu, mem, io) = expand_to_pipeline(&meta, &tree)?;
    let competition = [
        MatrixData { rows: n, cols: n, data: cpu.to_vec() },
        MatrixData { rows: n, cols: n, data: mem.to_vec() },
        MatrixData { rows: n, cols: n, data: io.to_vec() },
    ];

    let mut mask = MatrixData::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let structural = i == j
                || adjacency.data[i * n + j] != 0.0
                || adjacency.data[j * n + i] != 0.0
                || competition.iter().any(|c| c.data[i * n + j] != 0.0);
            if structural {
                mask.data[i * n + j] = 1.0;
            }
        }
    }

    let (tcn_left, tcn_right) = child_coefficient_matrices(&tree)?;

    Ok(QueryInputs {
        n,
        cost_rows,
        vertex_rows,
        adjacency,
        competition,
        mask,
        tcn_left,
        tcn_right,
        root: 0,
        actual_latency: trace.total_latency,
        label_norm: None,
        ocp_elapsed_sum,
    })
}

/// Tape-side mirror of [`PredictorParams`].
pub struct PredictorTensors {
    pub cost_w: Tensor,
    pub cost_b: Tensor,
    pub vertex_w: Tensor,
    pub vertex_b: Tensor,
    pub fusion: FusionWeights,
    pub gat: GatTensors,
    pub tcn: TcnTensors,
}

impl PredictorTensors {
    pub fn from_params(params: &PredictorParams, trainable: bool) -> PredictorTensors {
        let fusion = if trainable {
            FusionWeights::leaves(params.fusion)
        } else {
            FusionWeights::constants(params.fusion)
        };
        PredictorTensors {
            cost_w: params.mapper.cost_w.to_tensor(trainable),
            cost_b: params.mapper.cost_b.to_tensor(trainable),
            vertex_w: params.mapper.vertex_w.to_tensor(trainable),
            vertex_b: params.mapper.vertex_b.to_tensor(trainable),
            fusion,
            gat: GatTensors::from_params(&params.gat, trainable),
            tcn: TcnTensors::from_params(&params.tcn, trainable),
        }
    }

    pub fn to_params(&self) -> PredictorParams {
        PredictorParams {
            mapper: MapperParams {
                cost_w: MatrixData::from_tensor(&self.cost_w),
                cost_b: MatrixData::from_tensor(&self.cost_b),
                vertex_w: MatrixData::from_tensor(&self.vertex_w),
                vertex_b: MatrixData::from_tensor(&self.vertex_b),
            },
            fusion: self.fusion.values(),
            gat: self.gat.to_params(),
            tcn: self.tcn.to_params(),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.cost_w.clone(),
            self.cost_b.clone(),
            self.vertex_w.clone(),
            self.vertex_b.clone(),
        ];
        out.extend(self.fusion.tensors().map(Clone::clone));
        out.extend(self.gat.parameters());
        out.extend(self.tcn.parameters());
        out
    }
}

/// Fresh query-level parameters.
pub fn init_predictor(dims: &ModelDims, seed: u64) -> PredictorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x9A7);
    let h = dims.hidden;
    PredictorParams {
        mapper: MapperParams {
            cost_w: MatrixData::uniform_init(dims.cost_width, h, dims.cost_width, &mut rng),
            cost_b: MatrixData::zeros(1, h),
            vertex_w: MatrixData::uniform_init(dims.vertex_width, h, dims.vertex_width, &mut rng),
            vertex_b: MatrixData::zeros(1, h),
        },
        fusion: [1.0, 0.5, 0.5, 0.5],
        gat: GatParams::init(h, dims.gat_heads, 2, &mut rng),
        tcn: TcnParams::init(h, 3, &mut rng),
    }
}

/// Differentiable stage-2/3 forward pass producing the normalized latency
/// as a 1x1 tensor.
pub fn qpp_forward(
    params: &PredictorTensors,
    inputs: &QueryInputs,
    flags: AblationFlags,
) -> Result<Tensor> {
    let xc = inputs.cost_rows.to_tensor(false);
    let xv = inputs.vertex_rows.to_tensor(false);
    let mapped_cost = xc.matmul(&params.cost_w)?.add_row(&params.cost_b)?;
    let mapped_vertex = xv.matmul(&params.vertex_w)?.add_row(&params.vertex_b)?;
    let h0 = mapped_cost.add(&mapped_vertex)?.tanh()?;

    let m_f = inputs.adjacency.to_tensor(false);
    let mut adjusted = Vec::with_capacity(3);
    for comp in &inputs.competition {
        let comp_t = comp.to_tensor(false);
        adjusted.push(if flags.no_res_attn {
            comp_t
        } else {
            attention_adjust(&comp_t, &m_f)?
        });
    }
    let m_pipeline =
        fuse_pipeline(&m_f, [&adjusted[0], &adjusted[1], &adjusted[2]], &params.fusion)?;
    let bias = m_pipeline.add(&m_pipeline.transpose()?)?.scale(0.5)?;

    let mask = inputs.mask.to_tensor(false);
    let calibrated = gat_forward(&h0, &bias, &mask, &params.gat)?;

    let left = inputs.tcn_left.to_tensor(false);
    let right = inputs.tcn_right.to_tensor(false);
    tcn_forward(&calibrated, &left, &right, &params.tcn, inputs.root)
}

/// Predict one query's latency in seconds from its trace.
pub fn predict_query(trace: &QueryTrace, bundle: &ModelBundle) -> Result<f64> {
    let (predictor, label_stats) = bundle.require_predictor()?;
    let ocp = if bundle.flags.no_ocp { None } else { Some(bundle.require_ocp()?) };
    let inputs =
        build_query_inputs(trace, &bundle.encoder, &bundle.cost_stats, ocp, bundle.flags)?;
    let tensors = PredictorTensors::from_params(predictor, false);
    let y = qpp_forward(&tensors, &inputs, bundle.flags)?.item()?;
    Ok(label_stats.denormalize(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::bundle::LabelStats;
    use crate::models::encoder::FeatureEncoder;
    use crate::models::ocp::OcpParams;
    use crate::tensor::gradcheck::max_gradient_error;
    use crate::tracesim::{
        execute_parallel, generate_workload, CostGroundTruthModel, SimulatorConfig,
        WorkloadTemplate,
    };

    fn small_bundle_and_trace() -> (ModelBundle, QueryTrace) {
        let template = WorkloadTemplate {
            depth: (4, 4),
            joins: (1, 1),
            table_rows: (1500, 3000),
            modification_prob: 0.0,
            ..WorkloadTemplate::default()
        };
        let specs = generate_workload(&template, 1, 11).unwrap();
        let model = CostGroundTruthModel::default_for_catalog();
        let cfg = SimulatorConfig::default();
        let trace = execute_parallel(&specs[0], &model, &cfg, 5).unwrap();

        let pairs: Vec<_> =
            trace.operators.values().map(|o| (&o.instance, &o.utilization)).collect();
        let encoder = FeatureEncoder::fit(pairs.iter().map(|(i, u)| (*i, *u))).unwrap();
        let costs: Vec<_> = trace.records.values().map(|r| r.cost).collect();
        let cost_stats = CostStats::fit(costs.iter()).unwrap();
        let kinds: Vec<&str> = OperatorKind::CATALOG.iter().map(|k| k.name()).collect();
        let per_type_stats: std::collections::BTreeMap<String, CostStats> = OperatorKind::CATALOG
            .iter()
            .map(|k| (k.name().to_string(), cost_stats.clone()))
            .collect();
        let ocp = OcpParams::init(&kinds, encoder.width(), 8, 2, per_type_stats);
        let dims = ModelDims {
            hidden: 8,
            gat_heads: 1,
            vertex_width: vertex_width(&encoder),
            cost_width: 10,
        };
        let predictor = init_predictor(&dims, 3);
        let bundle = ModelBundle {
            version: crate::models::bundle::CHECKPOINT_VERSION,
            dims,
            flags: AblationFlags::default(),
            encoder,
            cost_stats,
            ocp: Some(ocp),
            predictor: Some(predictor),
            label_stats: Some(LabelStats { log_mean: -1.0, log_std: 1.0, median_secs: 0.2 }),
        };
        (bundle, trace)
    }

    #[test]
    fn prediction_is_finite_positive_and_deterministic() {
        let (bundle, trace) = small_bundle_and_trace();
        let a = predict_query(&trace, &bundle).unwrap();
        let b = predict_query(&trace, &bundle).unwrap();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_is_invariant_under_chunk_reordering() {
        let (bundle, trace) = small_bundle_and_trace();
        let a = predict_query(&trace, &bundle).unwrap();
        let mut shuffled = trace.clone();
        shuffled.chunks.reverse();
        let b = predict_query(&shuffled, &bundle).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn ablated_bundles_change_the_forward_path() {
        let (mut bundle, trace) = small_bundle_and_trace();
        let base = predict_query(&trace, &bundle).unwrap();
        bundle.flags.no_res_attn = true;
        let no_attn = predict_query(&trace, &bundle).unwrap();
        assert_ne!(base, no_attn);
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let (bundle, trace) = small_bundle_and_trace();
        let inputs = build_query_inputs(
            &trace,
            &bundle.encoder,
            &bundle.cost_stats,
            bundle.ocp.as_ref(),
            bundle.flags,
        )
        .unwrap();
        assert!(inputs.n >= 4, "expected a non-trivial tree, got {}", inputs.n);
        let tensors = PredictorTensors::from_params(bundle.predictor.as_ref().unwrap(), true);
        let leaves = tensors.parameters();
        let label = Tensor::scalar(0.37);
        let err = max_gradient_error(
            |_| qpp_forward(&tensors, &inputs, bundle.flags)?.mse(&label),
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
