//! Serial, parallel, and probe execution of pipeline specs.
//!
//! All three executors synthesize per-(operator, chunk) costs from the
//! hidden ground-truth model and record them exactly like an in-kernel
//! tracker would: every chunk carries the ordered list of operators that
//! processed it plus aligned cost-record ids.
//!
//! The parallel executor is a discrete-event simulation. Work items
//! (operator, chunk) progress at a rate reduced by resource contention:
//! while `k` operators bound on resource `r` are simultaneously active,
//! each runs at `1 / (1 + penalty_r * (k - 1))` per such resource. Wall
//! elapsed time therefore stretches under contention while the work-derived
//! cost components (CPU counters, memory, IO) stay fixed.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::{
    ChunkTrace, CostRecord, CostVector, OperatorId, OperatorInstance, OperatorKind,
    OperatorObservation, QueryTrace, RecordId, Resource, ResourceUtilization, TraceMode,
};
use crate::tracesim::background::{snapshot_utilization, BackgroundLoad};
use crate::tracesim::spec::{
    output_rows, CostGroundTruthModel, ModificationAction, ModificationEvent, PipelineSpec,
    SimulatorConfig,
};
use crate::{Error, Result};

/// Multiplicative measurement noise for one (operator, chunk) execution.
/// Derived from its own stream so it is independent of event order.
fn noise_factor(seed: u64, op: OperatorId, chunk: u64, scale: f64) -> f64 {
    if scale == 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 63) | (op.0 << 32) | (chunk & 0xffff_ffff));
    let z: f64 = rng.sample(StandardNormal);
    (scale * z).exp()
}

/// Per-operator utilization snapshots for one query run.
struct Environment {
    load: BackgroundLoad,
    utilization: BTreeMap<OperatorId, ResourceUtilization>,
}

impl Environment {
    fn for_query(spec: &PipelineSpec, cfg: &SimulatorConfig, seed: u64) -> Environment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xA11);
        let intensity = if cfg.background_high > cfg.background_low {
            rng.gen_range(cfg.background_low..=cfg.background_high)
        } else {
            cfg.background_low
        };
        let mut load = BackgroundLoad::new(intensity, seed);
        let mut utilization = BTreeMap::new();
        let mut ids: Vec<OperatorId> = spec.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        for id in ids {
            utilization.insert(id, snapshot_utilization(&mut load));
        }
        Environment { load, utilization }
    }

    fn observe_inserted(&mut self, inserted: &[OperatorInstance]) {
        for inst in inserted {
            self.utilization.insert(inst.id, snapshot_utilization(&mut self.load));
        }
    }

    fn get(&self, id: OperatorId) -> ResourceUtilization {
        self.utilization.get(&id).copied().unwrap_or(ResourceUtilization::IDLE)
    }
}

/// Initial chunks: each source table split into row-budget chunks.
fn source_chunks(spec: &PipelineSpec, chunk_rows: u64) -> Vec<(OperatorId, u64)> {
    let mut out = Vec::new();
    for &src in &spec.sources {
        let rows = spec.node(src).map_or(0, |n| n.input_rows);
        let budget = chunk_rows.max(1);
        let n_chunks = rows.div_ceil(budget).max(1);
        for i in 0..n_chunks {
            let r = if i + 1 == n_chunks { rows - budget * (n_chunks - 1) } else { budget };
            out.push((src, r));
        }
    }
    out
}

struct TraceBuilder {
    chunks: Vec<ChunkTrace>,
    records: BTreeMap<RecordId, CostRecord>,
    /// Rows each record saw as input, indexed by record id.
    row_log: Vec<u64>,
    next_record: u64,
}

impl TraceBuilder {
    fn new(n_chunks: usize) -> TraceBuilder {
        TraceBuilder {
            chunks: (0..n_chunks as u64)
                .map(|chunk_id| ChunkTrace {
                    chunk_id,
                    transform_addr: Vec::new(),
                    record_addr: Vec::new(),
                })
                .collect(),
            records: BTreeMap::new(),
            row_log: Vec::new(),
            next_record: 0,
        }
    }

    fn record(&mut self, chunk: usize, op: OperatorId, rows_in: u64, cost: CostVector) {
        let rid = RecordId(self.next_record);
        self.next_record += 1;
        self.records.insert(
            rid,
            CostRecord { operator_id: op, chunk_id: self.chunks[chunk].chunk_id, cost },
        );
        self.row_log.push(rows_in);
        self.chunks[chunk].transform_addr.push(op);
        self.chunks[chunk].record_addr.push(rid);
    }
}

/// Operator observations for the trace. `input_rows` is replaced by the
/// runtime-observed mean rows per processed chunk (the true cardinality a
/// tracker would report), computed over the records that made it into the
/// trace; operators that never ran keep the planner estimate.
fn observations<'a>(
    nodes: &BTreeMap<OperatorId, OperatorInstance>,
    env: &Environment,
    included: impl Iterator<Item = (&'a RecordId, &'a CostRecord)>,
    row_log: &[u64],
) -> BTreeMap<OperatorId, OperatorObservation> {
    let mut sums: BTreeMap<OperatorId, (u64, u64)> = BTreeMap::new();
    for (rid, rec) in included {
        if let Some(&rows) = row_log.get(rid.0 as usize) {
            let e = sums.entry(rec.operator_id).or_insert((0, 0));
            e.0 += rows;
            e.1 += 1;
        }
    }
    nodes
        .iter()
        .map(|(&id, inst)| {
            let mut instance = inst.clone();
            if let Some(&(total, count)) = sums.get(&id) {
                if count > 0 {
                    instance.input_rows = (total as f64 / count as f64).round() as u64;
                }
            }
            (id, OperatorObservation { instance, utilization: env.get(id) })
        })
        .collect()
}

/// Wall-clock interval one chunk spent in the serial executor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkSpan {
    pub chunk_id: u64,
    pub start: f64,
    pub end: f64,
}

/// Serial full-collection execution: degree of parallelism forced to 1,
/// zero contention, each chunk driven source-to-sink before the next
/// starts. Dynamic modifications do not fire; this mode exists to collect
/// clean per-operator training data.
pub fn execute_serial(
    spec: &PipelineSpec,
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<QueryTrace> {
    Ok(execute_serial_detailed(spec, model, cfg, seed)?.0)
}

/// Like [`execute_serial`] but also returns per-chunk wall-clock spans.
pub fn execute_serial_detailed(
    spec: &PipelineSpec,
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<(QueryTrace, Vec<ChunkSpan>)> {
    spec.validate()?;
    model.validate()?;
    let env = Environment::for_query(spec, cfg, seed);
    let consumer = spec.consumer_map();
    let nodes: BTreeMap<OperatorId, OperatorInstance> =
        spec.nodes.iter().map(|n| (n.id, n.clone())).collect();

    let starts = source_chunks(spec, cfg.chunk_rows);
    let mut builder = TraceBuilder::new(starts.len());
    let mut spans = Vec::with_capacity(starts.len());
    let mut wall = 0.0;

    for (chunk_idx, &(src, initial_rows)) in starts.iter().enumerate() {
        let start = wall;
        let mut at = src;
        let mut rows = initial_rows;
        loop {
            let inst = &nodes[&at];
            let util = env.get(at);
            let elapsed = model.base_elapsed(inst.op_type, rows, inst.input_cols, &util)
                * noise_factor(seed, at, chunk_idx as u64, model.noise_scale);
            wall += elapsed;
            let comps =
                model.cost_components(inst.op_type, rows, inst.input_cols, elapsed, elapsed);
            builder.record(chunk_idx, at, rows, CostVector::from_array(&comps));
            let out = output_rows(inst, rows);
            if at == spec.sink || out == 0 {
                break;
            }
            rows = out;
            at = consumer[&at];
        }
        spans.push(ChunkSpan { chunk_id: chunk_idx as u64, start, end: wall });
    }

    let operators = observations(&nodes, &env, builder.records.iter(), &builder.row_log);
    let trace = QueryTrace {
        query_id: spec.query_id,
        template_id: spec.template_id,
        mode: TraceMode::FullCollection,
        chunks: builder.chunks,
        operators,
        records: builder.records,
        total_latency: None,
        probe_budget: None,
    };
    Ok((trace, spans))
}

/// Outcome of a parallel run before packaging into a trace.
struct ParallelRun {
    builder: TraceBuilder,
    nodes: BTreeMap<OperatorId, OperatorInstance>,
    env: Environment,
    makespan: f64,
    /// Chunk indices that reached the sink, in completion order.
    completed: Vec<usize>,
}

struct ActiveItem {
    op: OperatorId,
    chunk: usize,
    remaining: f64,
    uncontended: f64,
    started: f64,
    rows_in: u64,
}

fn run_parallel(
    spec: &PipelineSpec,
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
    stop_after_results: Option<u64>,
) -> Result<ParallelRun> {
    spec.validate()?;
    model.validate()?;
    let mut env = Environment::for_query(spec, cfg, seed);
    let mut consumer = spec.consumer_map();
    let mut nodes: BTreeMap<OperatorId, OperatorInstance> =
        spec.nodes.iter().map(|n| (n.id, n.clone())).collect();
    let mut dop: BTreeMap<OperatorId, u32> =
        spec.nodes.iter().map(|n| (n.id, spec.dop_of(n.id))).collect();
    let mut pending: Vec<ModificationEvent> = spec.modifications.clone();

    let starts = source_chunks(spec, cfg.chunk_rows);
    let mut builder = TraceBuilder::new(starts.len());
    let mut chunk_rows: Vec<u64> = starts.iter().map(|&(_, r)| r).collect();

    let mut queues: BTreeMap<OperatorId, VecDeque<usize>> = BTreeMap::new();
    for (idx, &(src, _)) in starts.iter().enumerate() {
        queues.entry(src).or_default().push_back(idx);
    }
    let mut active: Vec<ActiveItem> = Vec::new();
    let mut active_per_op: BTreeMap<OperatorId, u32> = BTreeMap::new();
    let mut processed: BTreeMap<OperatorId, u64> = BTreeMap::new();
    let mut completed: Vec<usize> = Vec::new();
    let mut t = 0.0f64;

    'sim: loop {
        // Start ready work up to each operator's degree of parallelism.
        for (&op, q) in queues.iter_mut() {
            let slots = dop.get(&op).copied().unwrap_or(1).max(1);
            while (active_per_op.get(&op).copied().unwrap_or(0)) < slots {
                let Some(chunk) = q.pop_front() else { break };
                let inst = &nodes[&op];
                let rows = chunk_rows[chunk];
                let util = env.get(op);
                let work = model.base_elapsed(inst.op_type, rows, inst.input_cols, &util)
                    * noise_factor(seed, op, chunk as u64, model.noise_scale);
                active.push(ActiveItem {
                    op,
                    chunk,
                    remaining: work,
                    uncontended: work,
                    started: t,
                    rows_in: rows,
                });
                *active_per_op.entry(op).or_insert(0) += 1;
            }
        }
        if active.is_empty() {
            break;
        }

        // Contention: count distinct active operators per bound resource.
        let mut k = [0u32; 3];
        for (&op, &count) in &active_per_op {
            if count == 0 {
                continue;
            }
            let kind = nodes[&op].op_type;
            for (slot, r) in Resource::ALL.iter().enumerate() {
                if kind.is_bound_on(*r) {
                    k[slot] += 1;
                }
            }
        }
        let rate_of = |kind: OperatorKind| -> f64 {
            let mut penalty = 1.0;
            for (slot, r) in Resource::ALL.iter().enumerate() {
                if kind.is_bound_on(*r) && k[slot] > 1 {
                    penalty *= 1.0 + model.penalty.get(*r) * f64::from(k[slot] - 1);
                }
            }
            1.0 / penalty
        };

        let dts: Vec<f64> =
            active.iter().map(|it| it.remaining / rate_of(nodes[&it.op].op_type)).collect();
        let dt = dts.iter().cloned().fold(f64::INFINITY, f64::min);
        t += dt;

        let mut finished: Vec<ActiveItem> = Vec::new();
        let mut still_active: Vec<ActiveItem> = Vec::new();
        for (mut item, item_dt) in active.drain(..).zip(dts.iter()) {
            if *item_dt == dt {
                finished.push(item);
            } else {
                let rate = rate_of(nodes[&item.op].op_type);
                item.remaining = (item.remaining - dt * rate).max(0.0);
                still_active.push(item);
            }
        }
        active = still_active;
        finished.sort_by_key(|it| (it.op, it.chunk));

        for item in finished {
            *active_per_op.get_mut(&item.op).unwrap() -= 1;
            let inst = nodes[&item.op].clone();
            let wall = t - item.started;
            let comps = model.cost_components(
                inst.op_type,
                item.rows_in,
                inst.input_cols,
                item.uncontended,
                wall,
            );
            builder.record(item.chunk, item.op, item.rows_in, CostVector::from_array(&comps));
            let out = output_rows(&inst, item.rows_in);

            if item.op == spec.sink {
                completed.push(item.chunk);
                if let Some(budget) = stop_after_results {
                    if completed.len() as u64 >= budget {
                        break 'sim;
                    }
                }
            } else if out > 0 {
                chunk_rows[item.chunk] = out;
                let next = consumer[&item.op];
                queues.entry(next).or_default().push_back(item.chunk);
            }

            let done = processed.entry(item.op).or_insert(0);
            *done += 1;
            let fire_idx = pending
                .iter()
                .position(|m| m.affected.first() == Some(&item.op) && *done == m.trigger_chunk);
            if let Some(idx) = fire_idx {
                let event = pending.remove(idx);
                fire_modification(
                    &event, &mut consumer, &mut nodes, &mut dop, &mut queues, &mut env, &builder,
                );
            }
        }
    }

    Ok(ParallelRun { builder, nodes, env, makespan: t, completed })
}

/// Rewire the live pipeline for one modification event. Chunks already
/// processed keep their history; queued chunks are re-routed through the
/// new operators; in-flight items finish under the old operator.
fn fire_modification(
    event: &ModificationEvent,
    consumer: &mut BTreeMap<OperatorId, OperatorId>,
    nodes: &mut BTreeMap<OperatorId, OperatorInstance>,
    dop: &mut BTreeMap<OperatorId, u32>,
    queues: &mut BTreeMap<OperatorId, VecDeque<usize>>,
    env: &mut Environment,
    builder: &TraceBuilder,
) {
    env.observe_inserted(&event.inserted);
    match event.action {
        ModificationAction::ReplaceJoinAlgo => {
            let Some(&old) = event.affected.first() else { return };
            let Some(new_join) = event.inserted.first() else { return };
            let producers: Vec<OperatorId> = consumer
                .iter()
                .filter(|&(_, &c)| c == old)
                .map(|(&p, _)| p)
                .collect();
            let sorts = &event.inserted[1..];
            for (idx, &p) in producers.iter().enumerate() {
                if let Some(sort) = sorts.get(idx) {
                    consumer.insert(p, sort.id);
                    consumer.insert(sort.id, new_join.id);
                    nodes.insert(sort.id, sort.clone());
                    dop.insert(sort.id, 1);
                } else {
                    consumer.insert(p, new_join.id);
                }
            }
            // The old join keeps its downstream edge so in-flight chunks
            // still drain; nothing routes to it anymore.
            if let Some(&down) = consumer.get(&old) {
                consumer.insert(new_join.id, down);
            }
            nodes.insert(new_join.id, new_join.clone());
            dop.insert(new_join.id, dop.get(&old).copied().unwrap_or(1));
            // Chunks waiting at the old join go back through the rewired
            // edge of the producer they came from.
            if let Some(waiting) = queues.remove(&old) {
                for chunk in waiting {
                    let came_from = builder.chunks[chunk].transform_addr.last().copied();
                    let target = came_from
                        .and_then(|p| consumer.get(&p).copied())
                        .unwrap_or(new_join.id);
                    queues.entry(target).or_default().push_back(chunk);
                }
            }
        }
        ModificationAction::InsertOperators => {
            let (&u, &v) = match event.affected.as_slice() {
                [u, v] => (u, v),
                _ => return,
            };
            if consumer.get(&u) != Some(&v) || event.inserted.is_empty() {
                return;
            }
            let mut prev = u;
            for inst in &event.inserted {
                consumer.insert(prev, inst.id);
                nodes.insert(inst.id, inst.clone());
                dop.insert(inst.id, 1);
                prev = inst.id;
            }
            consumer.insert(prev, v);
        }
    }
}

/// Parallel execution of the whole query under the discrete-event model.
/// The returned trace is full-collection with `total_latency` set to the
/// simulated makespan.
pub fn execute_parallel(
    spec: &PipelineSpec,
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<QueryTrace> {
    let run = run_parallel(spec, model, cfg, seed, None)?;
    let operators =
        observations(&run.nodes, &run.env, run.builder.records.iter(), &run.builder.row_log);
    let trace = QueryTrace {
        query_id: spec.query_id,
        template_id: spec.template_id,
        mode: TraceMode::FullCollection,
        chunks: run.builder.chunks,
        operators,
        records: run.builder.records,
        total_latency: Some(run.makespan),
        probe_budget: None,
    };
    Ok(trace)
}

/// Probe execution: run the parallel simulation only until `probe_chunks`
/// result chunks have reached the sink, then keep exactly those chunks'
/// full histories. Modifications that fire inside the window leave both the
/// old and the new execution paths in the trace.
pub fn execute_probe(
    spec: &PipelineSpec,
    model: &CostGroundTruthModel,
    cfg: &SimulatorConfig,
    seed: u64,
    probe_chunks: u64,
) -> Result<QueryTrace> {
    if probe_chunks < 1 {
        return Err(Error::Config("probe_chunks must be >= 1".to_string()));
    }
    let run = run_parallel(spec, model, cfg, seed, Some(probe_chunks))?;

    let keep: Vec<usize> = run.completed.clone();
    let mut chunks = Vec::with_capacity(keep.len());
    let mut records = BTreeMap::new();
    for &idx in &keep {
        let chunk = run.builder.chunks[idx].clone();
        for rid in &chunk.record_addr {
            if let Some(rec) = run.builder.records.get(rid) {
                records.insert(*rid, rec.clone());
            }
        }
        chunks.push(chunk);
    }
    chunks.sort_by_key(|c| c.chunk_id);

    let kept_nodes: BTreeMap<OperatorId, OperatorInstance> = chunks
        .iter()
        .flat_map(|c| c.transform_addr.iter())
        .filter_map(|op| run.nodes.get(op).map(|inst| (*op, inst.clone())))
        .collect();
    let operators = observations(&kept_nodes, &run.env, records.iter(), &run.builder.row_log);

    Ok(QueryTrace {
        query_id: spec.query_id,
        template_id: spec.template_id,
        mode: TraceMode::Probe,
        chunks,
        operators,
        records,
        total_latency: None,
        probe_budget: Some(probe_chunks as u32),
    })
}
