//! Staged training: cost predictors first, then the query-level stack.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{OperatorKind, QueryTrace, COST_COMPONENTS};
use crate::harness::metrics::q_error;
use crate::harness::report::CurvePoint;
use crate::models::bundle::{LabelStats, ModelBundle, CHECKPOINT_VERSION};
use crate::models::encoder::{CostStats, FeatureEncoder};
use crate::models::mlp::MlpTensors;
use crate::models::ocp::OcpParams;
use crate::models::predict::{
    build_query_inputs, init_predictor, qpp_forward, vertex_width, PredictorTensors, QueryInputs,
};
use crate::models::{AblationFlags, ModelDims};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Training hyperparameters and the train/test template split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub ocp_epochs: u32,
    pub qpp_epochs: u32,
    pub batch_size: usize,
    pub learning_rate_ocp: f64,
    pub learning_rate_qpp: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    /// Templates excluded from every training stage.
    pub held_out_templates: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ocp_epochs: 40,
            qpp_epochs: 25,
            batch_size: 64,
            learning_rate_ocp: 0.03,
            learning_rate_qpp: 0.015,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 1,
            flags: AblationFlags::default(),
            held_out_templates: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate_ocp <= 0.0 || self.learning_rate_qpp <= 0.0 {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.ocp_epochs < 1 || self.qpp_epochs < 1 {
            return Err(Error::Config("epoch counts must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".to_string()));
        }
        Ok(())
    }

    pub fn is_held_out(&self, template_id: u64) -> bool {
        self.held_out_templates.contains(&template_id)
    }
}

/// Mini-batch gradient descent with momentum and global-norm clipping.
struct Sgd {
    lr: f64,
    momentum: f64,
    clip_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64, clip_norm: f64, params: &[Tensor]) -> Sgd {
        Sgd {
            lr,
            momentum,
            clip_norm,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    fn step(&mut self, params: &[Tensor]) -> Result<()> {
        let norm: f64 = params
            .iter()
            .map(|p| p.grad().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad();
            let mut values = p.to_vec();
            for i in 0..values.len() {
                v[i] = self.momentum * v[i] + scale * grad[i];
                values[i] -= self.lr * v[i];
            }
            p.set_values(&values)?;
            p.zero_grad();
        }
        Ok(())
    }
}

/// Stage-1 training output.
pub struct OcpTrainOutput {
    pub ocp: OcpParams,
    pub encoder: FeatureEncoder,
    pub cost_stats: CostStats,
    pub curve: Vec<CurvePoint>,
    /// Operator types present in the catalog but absent from the data.
    pub skipped_types: Vec<String>,
}

/// Fit the feature encoder and train one cost predictor per operator type
/// on full-collection traces. Held-out templates are filtered out first.
pub fn train_ocp(
    traces: &[QueryTrace],
    dims: &ModelDims,
    config: &TrainConfig,
) -> Result<OcpTrainOutput> {
    config.validate()?;
    let usable: Vec<&QueryTrace> =
        traces.iter().filter(|t| !config.is_held_out(t.template_id)).collect();
    if usable.is_empty() {
        return Err(Error::Config("no training traces after the template split".to_string()));
    }

    let pairs: Vec<_> = usable
        .iter()
        .flat_map(|t| t.operators.values().map(|o| (&o.instance, &o.utilization)))
        .collect();
    let encoder = FeatureEncoder::fit(pairs.iter().map(|(i, u)| (*i, *u)))?;
    let cost_stats = CostStats::fit(usable.iter().flat_map(|t| t.records.values().map(|r| &r.cost)))?;

    // Per-type sample matrices; targets are z-scored with per-type stats.
    let mut raw_costs: BTreeMap<&'static str, Vec<crate::domain::CostVector>> = BTreeMap::new();
    let mut raw_features: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    let width = encoder.width();
    for trace in &usable {
        for rec in trace.records.values() {
            let Some(obs) = trace.operators.get(&rec.operator_id) else { continue };
            let name = obs.instance.op_type.name();
            raw_features
                .entry(name)
                .or_default()
                .extend(encoder.encode(&obs.instance, &obs.utilization));
            raw_costs.entry(name).or_default().push(rec.cost);
            *counts.entry(name).or_insert(0) += 1;
        }
    }

    let mut skipped_types = Vec::new();
    let mut present: Vec<&'static str> = Vec::new();
    for kind in OperatorKind::CATALOG {
        if counts.get(kind.name()).copied().unwrap_or(0) == 0 {
            log::warn!("no samples for operator type {}; predictor skipped", kind.name());
            skipped_types.push(kind.name().to_string());
        } else {
            present.push(kind.name());
        }
    }
    if present.is_empty() {
        return Err(Error::Config("no cost records in the training traces".to_string()));
    }

    let mut per_type_stats = BTreeMap::new();
    let mut features: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut targets: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for &name in &present {
        let costs = &raw_costs[name];
        let stats = CostStats::fit(costs.iter())?;
        let mut ys = Vec::with_capacity(costs.len() * COST_COMPONENTS);
        for c in costs {
            ys.extend(stats.normalize(&c.to_array()));
        }
        per_type_stats.insert(name.to_string(), stats);
        targets.insert(name, ys);
        features.insert(name, raw_features.remove(name).unwrap());
    }

    let init = OcpParams::init(&present, width, dims.hidden, config.seed, per_type_stats);
    let mut nets: BTreeMap<&'static str, (MlpTensors, Sgd)> = BTreeMap::new();
    for &name in &present {
        let net = MlpTensors::from_params(&init.models[name], true);
        let opt = Sgd::new(
            config.learning_rate_ocp,
            config.momentum,
            config.clip_norm,
            &net.parameters(),
        );
        nets.insert(name, (net, opt));
    }

    let mut curve = Vec::with_capacity(config.ocp_epochs as usize);
    for epoch in 1..=config.ocp_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0xE90C ^ u64::from(epoch));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for &name in &present {
            let n = counts[name];
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let xs = &features[name];
            let ys = &targets[name];
            let (net, opt) = nets.get_mut(name).unwrap();
            for batch in order.chunks(config.batch_size) {
                let b = batch.len();
                let mut xb = Vec::with_capacity(b * width);
                let mut yb = Vec::with_capacity(b * COST_COMPONENTS);
                for &i in batch {
                    xb.extend_from_slice(&xs[i * width..(i + 1) * width]);
                    yb.extend_from_slice(&ys[i * COST_COMPONENTS..(i + 1) * COST_COMPONENTS]);
                }
                let x = Tensor::from_vec(b, width, xb)?;
                let y = Tensor::from_vec(b, COST_COMPONENTS, yb)?;
                let loss = net.forward(&x)?.mse(&y)?;
                loss.backward()?;
                opt.step(&net.parameters())?;
                loss_sum += loss.item()? * b as f64;
                loss_n += b;
            }
        }
        curve.push(CurvePoint {
            epoch,
            train_loss: loss_sum / loss_n as f64,
            train_q_error: None,
        });
    }

    let mut models = BTreeMap::new();
    for (name, (net, _)) in &nets {
        models.insert(name.to_string(), net.to_params());
    }
    let ocp = OcpParams { models, stats: init.stats };
    Ok(OcpTrainOutput { ocp, encoder, cost_stats, curve, skipped_types })
}

/// Fit only the encoder and cost statistics, training no predictors; the
/// stage-1 stand-in when the cost predictors are ablated.
pub fn fit_stats_only(traces: &[QueryTrace], config: &TrainConfig) -> Result<OcpTrainOutput> {
    config.validate()?;
    let usable: Vec<&QueryTrace> =
        traces.iter().filter(|t| !config.is_held_out(t.template_id)).collect();
    if usable.is_empty() {
        return Err(Error::Config("no training traces after the template split".to_string()));
    }
    let pairs: Vec<_> = usable
        .iter()
        .flat_map(|t| t.operators.values().map(|o| (&o.instance, &o.utilization)))
        .collect();
    let encoder = FeatureEncoder::fit(pairs.iter().map(|(i, u)| (*i, *u)))?;
    let cost_stats =
        CostStats::fit(usable.iter().flat_map(|t| t.records.values().map(|r| &r.cost)))?;
    Ok(OcpTrainOutput {
        ocp: OcpParams { models: BTreeMap::new(), stats: BTreeMap::new() },
        encoder,
        cost_stats,
        curve: Vec::new(),
        skipped_types: OperatorKind::CATALOG.iter().map(|k| k.name().to_string()).collect(),
    })
}

/// Stage-2/3 training output.
pub struct QppTrainOutput {
    pub bundle: ModelBundle,
    pub curve: Vec<CurvePoint>,
    /// Traces dropped because their inputs could not be built.
    pub skipped_queries: usize,
}

/// Jointly train the fusion weights, mappers, attention, convolution, and
/// readout on labeled probe traces, on top of a fitted stage-1 output.
pub fn train_qpp(
    traces: &[QueryTrace],
    stage1: &OcpTrainOutput,
    dims: &ModelDims,
    config: &TrainConfig,
) -> Result<QppTrainOutput> {
    config.validate()?;
    let usable: Vec<&QueryTrace> = traces
        .iter()
        .filter(|t| !config.is_held_out(t.template_id) && t.total_latency.is_some())
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(
            "no labeled training traces after the template split".to_string(),
        ));
    }

    let mut labels: Vec<f64> = usable.iter().map(|t| t.total_latency.unwrap()).collect();
    for l in &labels {
        if !(*l > 0.0) {
            return Err(Error::InvalidTrace(format!("non-positive latency label {l}")));
        }
    }
    let logs: Vec<f64> = labels.iter().map(|l| l.ln()).collect();
    let log_mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - log_mean).powi(2)).sum::<f64>() / logs.len() as f64;
    let log_std = if var.sqrt() < 1e-9 { 1.0 } else { var.sqrt() };
    labels.sort_by(|a, b| a.partial_cmp(b).expect("finite labels"));
    let median_secs = crate::harness::metrics::nearest_rank(&labels, 50.0);
    let label_stats = LabelStats { log_mean, log_std, median_secs };

    let dims = ModelDims {
        hidden: dims.hidden,
        gat_heads: dims.gat_heads,
        vertex_width: vertex_width(&stage1.encoder),
        cost_width: if config.flags.no_ocp {
            vertex_width(&stage1.encoder)
        } else {
            COST_COMPONENTS
        },
    };
    if dims.hidden % dims.gat_heads.max(1) != 0 {
        return Err(Error::Config(format!(
            "hidden width {} not divisible by {} attention heads",
            dims.hidden, dims.gat_heads
        )));
    }

    let ocp = if config.flags.no_ocp { None } else { Some(&stage1.ocp) };
    let mut inputs: Vec<QueryInputs> = Vec::with_capacity(usable.len());
    let mut skipped_queries = 0usize;
    for trace in &usable {
        match build_query_inputs(trace, &stage1.encoder, &stage1.cost_stats, ocp, config.flags) {
            Ok(mut input) => {
                input.label_norm = Some(label_stats.normalize(trace.total_latency.unwrap()));
                inputs.push(input);
            }
            Err(e) => {
                log::warn!("skipping query {}: {e}", trace.query_id);
                skipped_queries += 1;
            }
        }
    }
    if inputs.is_empty() {
        return Err(Error::Config("no usable training queries".to_string()));
    }

    let predictor = init_predictor(&dims, config.seed);
    let tensors = PredictorTensors::from_params(&predictor, true);
    let params = tensors.parameters();
    let mut opt = Sgd::new(config.learning_rate_qpp, config.momentum, config.clip_norm, &params);

    let mut curve = Vec::with_capacity(config.qpp_epochs as usize);
    for epoch in 1..=config.qpp_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x9BB ^ u64::from(epoch));
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut qerr_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            for &qi in batch {
                let input = &inputs[qi];
                let label = Tensor::scalar(input.label_norm.unwrap());
                let out = qpp_forward(&tensors, input, config.flags)?;
                let loss = out.mse(&label)?;
                // scaling before backward averages gradients over the batch
                loss.scale(1.0 / batch.len() as f64)?.backward()?;
                loss_sum += loss.item()?;
                let predicted = label_stats.denormalize(out.item()?);
                qerr_sum += q_error(predicted, input.actual_latency.unwrap())?;
            }
            opt.step(&params)?;
        }
        curve.push(CurvePoint {
            epoch,
            train_loss: loss_sum / inputs.len() as f64,
            train_q_error: Some(qerr_sum / inputs.len() as f64),
        });
    }

    let bundle = ModelBundle {
        version: CHECKPOINT_VERSION,
        dims,
        flags: config.flags,
        encoder: stage1.encoder.clone(),
        cost_stats: stage1.cost_stats.clone(),
        ocp: if config.flags.no_ocp { None } else { Some(stage1.ocp.clone()) },
        predictor: Some(tensors.to_params()),
        label_stats: Some(label_stats),
    };
    Ok(QppTrainOutput { bundle, curve, skipped_queries })
}
