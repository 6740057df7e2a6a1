//! Pipeline specifications, dynamic modifications, and the hidden cost model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{OperatorId, OperatorInstance, OperatorKind, Resource, ResourceUtilization};
use crate::{Error, Result};

/// A parallel pipeline: a connected DAG with a single sink where every
/// non-sink operator feeds exactly one consumer. Join operators have two
/// producers, so the structure is an in-tree oriented toward the sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub query_id: u64,
    pub template_id: u64,
    pub nodes: Vec<OperatorInstance>,
    /// `(producer, consumer)` pairs.
    pub edges: Vec<(OperatorId, OperatorId)>,
    pub sources: Vec<OperatorId>,
    pub sink: OperatorId,
    /// Degree of parallelism per operator; absent means 1.
    pub dop: BTreeMap<OperatorId, u32>,
    /// Dynamic modifications latent in this plan, fired during execution.
    pub modifications: Vec<ModificationEvent>,
}

impl PipelineSpec {
    pub fn node(&self, id: OperatorId) -> Option<&OperatorInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn dop_of(&self, id: OperatorId) -> u32 {
        self.dop.get(&id).copied().unwrap_or(1).max(1)
    }

    /// Consumer of each non-sink operator.
    pub fn consumer_map(&self) -> BTreeMap<OperatorId, OperatorId> {
        self.edges.iter().map(|&(p, c)| (p, c)).collect()
    }

    /// Check every structural invariant; used before execution and after
    /// applying a modification.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidSpec(m));
        if self.nodes.is_empty() {
            return err("pipeline has no operators".to_string());
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return err(format!("duplicate operator id {}", n.id));
            }
            if n.input_cols < 1 {
                return err(format!("{} has input_cols < 1", n.id));
            }
        }
        if !ids.contains(&self.sink) {
            return err(format!("sink {} is not a node", self.sink));
        }
        let mut consumers: BTreeMap<OperatorId, Vec<OperatorId>> = BTreeMap::new();
        let mut producers: BTreeMap<OperatorId, Vec<OperatorId>> = BTreeMap::new();
        for &(p, c) in &self.edges {
            if !ids.contains(&p) || !ids.contains(&c) {
                return err(format!("edge ({p}, {c}) references unknown node"));
            }
            consumers.entry(p).or_default().push(c);
            producers.entry(c).or_default().push(p);
        }
        for n in &self.nodes {
            let out = consumers.get(&n.id).map_or(0, Vec::len);
            if n.id == self.sink {
                if out != 0 {
                    return err(format!("sink {} has outgoing edges", n.id));
                }
            } else if out != 1 {
                return err(format!("{} must feed exactly one consumer, has {out}", n.id));
            }
            let inp = producers.get(&n.id).map_or(0, Vec::len);
            let is_source = self.sources.contains(&n.id);
            if is_source && inp != 0 {
                return err(format!("source {} has producers", n.id));
            }
            if !is_source && inp == 0 {
                return err(format!("{} is neither a source nor fed by a producer", n.id));
            }
        }
        for s in &self.sources {
            if !ids.contains(s) {
                return err(format!("source {s} is not a node"));
            }
        }
        if self.sources.is_empty() {
            return err("pipeline has no sources".to_string());
        }
        // Connectivity and acyclicity: walking consumers from every node
        // must reach the sink without revisiting a node.
        for n in &self.nodes {
            let mut seen = BTreeSet::new();
            let mut at = n.id;
            while at != self.sink {
                if !seen.insert(at) {
                    return err(format!("cycle through {at}"));
                }
                match consumers.get(&at).and_then(|v| v.first()) {
                    Some(&next) => at = next,
                    None => return err(format!("{at} cannot reach the sink")),
                }
            }
        }
        for m in &self.modifications {
            if m.trigger_chunk < 1 {
                return err("modification trigger_chunk must be >= 1".to_string());
            }
        }
        Ok(())
    }

    /// Operator ids in breadth-first order from the sink (deterministic).
    pub fn ids_from_sink(&self) -> Vec<OperatorId> {
        let mut producers: BTreeMap<OperatorId, Vec<OperatorId>> = BTreeMap::new();
        for &(p, c) in &self.edges {
            producers.entry(c).or_default().push(p);
        }
        let mut out = Vec::new();
        let mut queue = VecDeque::from([self.sink]);
        while let Some(id) = queue.pop_front() {
            out.push(id);
            if let Some(ps) = producers.get(&id) {
                let mut ps = ps.clone();
                ps.sort_unstable();
                queue.extend(ps);
            }
        }
        out
    }
}

/// Kinds of dynamic pipeline modification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModificationAction {
    /// Swap a join for a different algorithm (and sort its inputs).
    ReplaceJoinAlgo,
    /// Splice new operators into an edge.
    InsertOperators,
}

/// A latent runtime modification. It fires once the affected operator has
/// processed `trigger_chunk` chunks, which models plans revised early when
/// observed cardinalities diverge from the planner's estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModificationEvent {
    pub trigger_chunk: u64,
    pub action: ModificationAction,
    /// `ReplaceJoinAlgo`: the join to replace. `InsertOperators`: the
    /// `(producer, consumer)` edge to splice into.
    pub affected: Vec<OperatorId>,
    /// `ReplaceJoinAlgo`: replacement join first, then one sort per
    /// producer edge. `InsertOperators`: the chain to splice, in order.
    pub inserted: Vec<OperatorInstance>,
}

/// Rewrite a pipeline according to a modification event. Pure; the result
/// is validated.
pub fn apply_modification(spec: &PipelineSpec, event: &ModificationEvent) -> Result<PipelineSpec> {
    let mut out = spec.clone();
    out.modifications = Vec::new();
    match event.action {
        ModificationAction::ReplaceJoinAlgo => {
            let old = *event
                .affected
                .first()
                .ok_or_else(|| Error::InvalidSpec("replace event without target".to_string()))?;
            let new_join = event
                .inserted
                .first()
                .ok_or_else(|| Error::InvalidSpec("replace event without replacement".to_string()))?
                .clone();
            if spec.node(old).is_none() {
                return Err(Error::InvalidSpec(format!("replace target {old} not in pipeline")));
            }
            let mut producers: Vec<OperatorId> = spec
                .edges
                .iter()
                .filter(|(_, c)| *c == old)
                .map(|&(p, _)| p)
                .collect();
            // sorts pair with producers in id order
            producers.sort_unstable();
            let sorts = &event.inserted[1..];
            if sorts.len() > producers.len() {
                return Err(Error::InvalidSpec(
                    "more sorts than producer edges in replace event".to_string(),
                ));
            }
            out.nodes.retain(|n| n.id != old);
            out.nodes.push(new_join.clone());
            out.dop.insert(new_join.id, spec.dop_of(old));
            out.dop.remove(&old);
            // re-point edges around the old join, inserting a sort on each
            // producer edge that has one
            let mut edges = Vec::new();
            for &(p, c) in &spec.edges {
                if c == old {
                    let idx = producers.iter().position(|&x| x == p).unwrap();
                    if let Some(sort) = sorts.get(idx) {
                        edges.push((p, sort.id));
                        edges.push((sort.id, new_join.id));
                    } else {
                        edges.push((p, new_join.id));
                    }
                } else if p == old {
                    edges.push((new_join.id, c));
                } else {
                    edges.push((p, c));
                }
            }
            out.edges = edges;
            out.nodes.extend(sorts.iter().cloned());
        }
        ModificationAction::InsertOperators => {
            let (&u, &v) = match event.affected.as_slice() {
                [u, v] => (u, v),
                _ => {
                    return Err(Error::InvalidSpec(
                        "insert event needs a (producer, consumer) pair".to_string(),
                    ))
                }
            };
            if event.inserted.is_empty() {
                return Err(Error::InvalidSpec("insert event with no operators".to_string()));
            }
            let pos = out
                .edges
                .iter()
                .position(|&(p, c)| p == u && c == v)
                .ok_or_else(|| Error::InvalidSpec(format!("edge ({u}, {v}) not in pipeline")))?;
            out.edges.remove(pos);
            let mut prev = u;
            for inst in &event.inserted {
                out.edges.push((prev, inst.id));
                prev = inst.id;
                out.nodes.push(inst.clone());
            }
            out.edges.push((prev, v));
        }
    }
    out.validate()?;
    Ok(out)
}

/// Per-resource coefficient triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceCoeffs {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
}

impl ResourceCoeffs {
    pub fn get(&self, r: Resource) -> f64 {
        match r {
            Resource::Cpu => self.cpu,
            Resource::Mem => self.mem,
            Resource::Io => self.io,
        }
    }

    pub const ZERO: ResourceCoeffs = ResourceCoeffs { cpu: 0.0, mem: 0.0, io: 0.0 };
}

/// Ground-truth cost coefficients for one operator type. The elapsed-time
/// model is affine in rows and row*cols; the remaining cost components are
/// derived from it and from the data volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeCost {
    /// Fixed seconds per chunk.
    pub fixed_s: f64,
    /// Seconds per input row.
    pub per_row_s: f64,
    /// Seconds per input cell (row * column).
    pub per_cell_s: f64,
    /// Fraction of uncontended elapsed time spent on-CPU.
    pub cpu_frac: f64,
    /// Instructions retired per cycle.
    pub ipc: f64,
    pub cache_refs_per_cell: f64,
    pub cache_miss_rate: f64,
    pub mem_bytes_per_cell: f64,
    pub mem_peak_factor: f64,
    /// Cells per disk block read; 0 disables reads.
    pub io_read_cells_per_block: f64,
    /// Cells per disk block written; 0 disables writes.
    pub io_write_cells_per_block: f64,
}

impl TypeCost {
    pub const FREE: TypeCost = TypeCost {
        fixed_s: 0.0,
        per_row_s: 0.0,
        per_cell_s: 0.0,
        cpu_frac: 0.0,
        ipc: 1.0,
        cache_refs_per_cell: 0.0,
        cache_miss_rate: 0.0,
        mem_bytes_per_cell: 0.0,
        mem_peak_factor: 1.0,
        io_read_cells_per_block: 0.0,
        io_write_cells_per_block: 0.0,
    };
}

/// The simulator's hidden oracle: per-type base costs, contention
/// penalties, utilization sensitivity, and measurement noise. The learned
/// models never see these coefficients, only traces generated from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGroundTruthModel {
    pub per_type: BTreeMap<OperatorKind, TypeCost>,
    /// Contention slowdown per extra concurrently active operator sharing a
    /// bound resource: an active operator runs at
    /// `1 / prod_r (1 + penalty_r * (k_r - 1))`.
    pub penalty: ResourceCoeffs,
    /// Slowdown per unit of pre-execution background utilization.
    pub util_sens: ResourceCoeffs,
    /// Log-scale sigma of multiplicative measurement noise.
    pub noise_scale: f64,
    /// Nominal CPU frequency used to derive cycle counts.
    pub cpu_hz: f64,
}

impl CostGroundTruthModel {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, what: &str| {
            if v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be >= 0, got {v}")))
            }
        };
        for (kind, tc) in &self.per_type {
            nonneg(tc.fixed_s, &format!("{kind} fixed_s"))?;
            nonneg(tc.per_row_s, &format!("{kind} per_row_s"))?;
            nonneg(tc.per_cell_s, &format!("{kind} per_cell_s"))?;
        }
        for r in Resource::ALL {
            nonneg(self.penalty.get(r), "penalty")?;
            nonneg(self.util_sens.get(r), "util_sens")?;
        }
        nonneg(self.noise_scale, "noise_scale")
    }

    pub fn type_cost(&self, kind: OperatorKind) -> TypeCost {
        self.per_type.get(&kind).copied().unwrap_or(TypeCost::FREE)
    }

    /// Uncontended elapsed seconds for one chunk, before measurement noise.
    pub fn base_elapsed(
        &self,
        kind: OperatorKind,
        rows: u64,
        cols: u32,
        util: &ResourceUtilization,
    ) -> f64 {
        let tc = self.type_cost(kind);
        let cells = rows as f64 * cols as f64;
        let base = tc.fixed_s + rows as f64 * tc.per_row_s + cells * tc.per_cell_s;
        let slowdown: f64 = kind
            .bound_resources()
            .iter()
            .map(|&r| self.util_sens.get(r) * util.get(r))
            .sum();
        base * (1.0 + slowdown)
    }

    /// Full cost vector for one (operator, chunk) execution.
    ///
    /// `wall_elapsed` is what the tracker measures (it stretches under
    /// contention); all other components depend only on the work done.
    pub fn cost_components(
        &self,
        kind: OperatorKind,
        rows: u64,
        cols: u32,
        uncontended_elapsed: f64,
        wall_elapsed: f64,
    ) -> [f64; crate::domain::COST_COMPONENTS] {
        let tc = self.type_cost(kind);
        let cells = rows as f64 * cols as f64;
        let cpu_time = uncontended_elapsed * tc.cpu_frac;
        let cycles = cpu_time * self.cpu_hz;
        let refs = cells * tc.cache_refs_per_cell;
        let mem = cells * tc.mem_bytes_per_cell;
        let reads =
            if tc.io_read_cells_per_block > 0.0 { cells / tc.io_read_cells_per_block } else { 0.0 };
        let writes = if tc.io_write_cells_per_block > 0.0 {
            cells / tc.io_write_cells_per_block
        } else {
            0.0
        };
        [
            wall_elapsed,
            cpu_time,
            cycles,
            cycles * tc.ipc,
            refs,
            refs * tc.cache_miss_rate,
            mem,
            mem * tc.mem_peak_factor,
            reads,
            writes,
        ]
    }

    /// Default coefficients for the built-in catalog. Types differ enough
    /// that per-type cost structure is genuinely informative.
    pub fn default_for_catalog() -> CostGroundTruthModel {
        use OperatorKind::*;
        let mk = |fixed: f64,
                  per_row: f64,
                  per_cell: f64,
                  cpu_frac: f64,
                  ipc: f64,
                  mem_b: f64,
                  read_cb: f64,
                  write_cb: f64| TypeCost {
            fixed_s: fixed,
            per_row_s: per_row,
            per_cell_s: per_cell,
            cpu_frac,
            ipc,
            cache_refs_per_cell: 2.0,
            cache_miss_rate: 0.08,
            mem_bytes_per_cell: mem_b,
            mem_peak_factor: 1.5,
            io_read_cells_per_block: read_cb,
            io_write_cells_per_block: write_cb,
        };
        let per_type = BTreeMap::from([
            (Scan, mk(2e-4, 6e-7, 1.2e-7, 0.55, 2.8, 8.0, 512.0, 0.0)),
            (Filter, mk(5e-5, 2.5e-7, 4e-8, 0.95, 3.4, 8.0, 0.0, 0.0)),
            (Expression, mk(5e-5, 3e-7, 9e-8, 0.95, 3.2, 8.0, 0.0, 0.0)),
            (HashJoin, mk(4e-4, 2.2e-6, 1.5e-7, 0.85, 1.6, 24.0, 0.0, 0.0)),
            (MergeJoin, mk(3e-4, 1.6e-6, 1.2e-7, 0.85, 1.9, 16.0, 0.0, 0.0)),
            (MergeSort, mk(3e-4, 1.8e-6, 1.1e-7, 0.9, 2.2, 16.0, 0.0, 4096.0)),
            (PartialSort, mk(1e-4, 9e-7, 6e-8, 0.95, 2.6, 8.0, 0.0, 0.0)),
            (Aggregate, mk(2.5e-4, 1.4e-6, 1.0e-7, 0.9, 2.0, 20.0, 0.0, 0.0)),
            (Exchange, mk(8e-5, 3.5e-7, 3e-8, 0.8, 2.4, 8.0, 0.0, 0.0)),
            (Limit, mk(2e-5, 5e-8, 0.0, 0.9, 3.0, 0.0, 0.0, 0.0)),
            (Sink, mk(1e-4, 2e-7, 5e-8, 0.4, 1.8, 8.0, 0.0, 1024.0)),
        ]);
        CostGroundTruthModel {
            per_type,
            penalty: ResourceCoeffs { cpu: 0.35, mem: 0.25, io: 0.5 },
            util_sens: ResourceCoeffs { cpu: 0.5, mem: 0.3, io: 0.6 },
            noise_scale: 0.05,
            cpu_hz: 3.0e9,
        }
    }
}

/// Executor environment knobs that are not part of the cost oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    /// Rows per data chunk.
    pub chunk_rows: u64,
    /// Background load intensity range; one intensity is drawn per query.
    pub background_low: f64,
    pub background_high: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig { chunk_rows: 1024, background_low: 0.0, background_high: 0.9 }
    }
}

/// Rows a chunk carries after passing through an operator.
pub fn output_rows(inst: &OperatorInstance, rows_in: u64) -> u64 {
    match inst.op_type {
        OperatorKind::Filter => {
            let sel = inst.numeric_param("selectivity").unwrap_or(1.0);
            (rows_in as f64 * sel).round() as u64
        }
        OperatorKind::HashJoin | OperatorKind::MergeJoin => {
            let mult = inst.numeric_param("multiplier").unwrap_or(1.0);
            (rows_in as f64 * mult).round() as u64
        }
        OperatorKind::Aggregate => {
            let groups = inst.numeric_param("groups").unwrap_or(rows_in as f64) as u64;
            rows_in.min(groups.max(1))
        }
        OperatorKind::Limit => {
            let limit = inst.numeric_param("limit").unwrap_or(rows_in as f64) as u64;
            rows_in.min(limit.max(1))
        }
        _ => rows_in,
    }
}
