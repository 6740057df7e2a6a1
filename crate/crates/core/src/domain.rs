//! Core vocabulary shared by the simulator, graph construction, and models.
//!
//! Everything here is immutable plain data, serializable as JSON. A query
//! trace file is JSONL: one [`QueryTrace`] object per line. That file format
//! is the boundary through which a real DBMS tracker could replace the
//! bundled simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hardware resource classes an operator can be bound on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Cpu,
    Mem,
    Io,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::Cpu, Resource::Mem, Resource::Io];
}

/// Physical operator types. The catalog is fixed at build time; the
/// declaration order below is the total order used for competition-matrix
/// rows and columns and must not change between runs or checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    Scan,
    Filter,
    Expression,
    HashJoin,
    MergeJoin,
    MergeSort,
    PartialSort,
    Aggregate,
    Exchange,
    Limit,
    Sink,
}

impl OperatorKind {
    pub const CATALOG: [OperatorKind; 11] = [
        OperatorKind::Scan,
        OperatorKind::Filter,
        OperatorKind::Expression,
        OperatorKind::HashJoin,
        OperatorKind::MergeJoin,
        OperatorKind::MergeSort,
        OperatorKind::PartialSort,
        OperatorKind::Aggregate,
        OperatorKind::Exchange,
        OperatorKind::Limit,
        OperatorKind::Sink,
    ];

    /// Position in the catalog order.
    pub fn index(self) -> usize {
        Self::CATALOG.iter().position(|k| *k == self).expect("kind in catalog")
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Scan => "Scan",
            OperatorKind::Filter => "Filter",
            OperatorKind::Expression => "Expression",
            OperatorKind::HashJoin => "HashJoin",
            OperatorKind::MergeJoin => "MergeJoin",
            OperatorKind::MergeSort => "MergeSort",
            OperatorKind::PartialSort => "PartialSort",
            OperatorKind::Aggregate => "Aggregate",
            OperatorKind::Exchange => "Exchange",
            OperatorKind::Limit => "Limit",
            OperatorKind::Sink => "Sink",
        }
    }

    /// Whether the default implementation of this operator is vectorized.
    pub fn simd(self) -> bool {
        matches!(
            self,
            OperatorKind::Scan
                | OperatorKind::Filter
                | OperatorKind::Expression
                | OperatorKind::MergeSort
                | OperatorKind::PartialSort
                | OperatorKind::Aggregate
        )
    }

    /// Resources this operator type is bound on. Never empty.
    pub fn bound_resources(self) -> &'static [Resource] {
        use Resource::*;
        match self {
            OperatorKind::Scan => &[Cpu, Io],
            OperatorKind::Filter => &[Cpu],
            OperatorKind::Expression => &[Cpu],
            OperatorKind::HashJoin => &[Cpu, Mem],
            OperatorKind::MergeJoin => &[Cpu, Mem],
            OperatorKind::MergeSort => &[Cpu, Mem],
            OperatorKind::PartialSort => &[Cpu],
            OperatorKind::Aggregate => &[Cpu, Mem],
            OperatorKind::Exchange => &[Cpu],
            OperatorKind::Limit => &[Cpu],
            OperatorKind::Sink => &[Io],
        }
    }

    pub fn is_bound_on(self, r: Resource) -> bool {
        self.bound_resources().contains(&r)
    }

    pub fn is_join(self) -> bool {
        matches!(self, OperatorKind::HashJoin | OperatorKind::MergeJoin)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opaque operator instance id, unique within one query. The simulator
/// assigns sequential values so traces are seed-deterministic.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct OperatorId(pub u64);

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{}", self.0)
    }
}

/// Id of one per-(operator, chunk) cost record within a trace.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct RecordId(pub u64);

/// A named calling parameter of an operator instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorParam {
    pub name: String,
    pub value: ParamValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Numeric(f64),
    Categorical(String),
}

impl OperatorParam {
    pub fn numeric(name: &str, value: f64) -> Self {
        OperatorParam { name: name.to_string(), value: ParamValue::Numeric(value) }
    }

    pub fn categorical(name: &str, value: &str) -> Self {
        OperatorParam { name: name.to_string(), value: ParamValue::Categorical(value.to_string()) }
    }
}

/// One operator instance inside a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorInstance {
    pub id: OperatorId,
    pub op_type: OperatorKind,
    pub params: Vec<OperatorParam>,
    /// Planner cardinality estimate for this operator's input.
    pub input_rows: u64,
    pub input_cols: u32,
}

impl OperatorInstance {
    pub fn numeric_param(&self, name: &str) -> Option<f64> {
        self.params.iter().find_map(|p| match (&p.value, p.name == name) {
            (ParamValue::Numeric(v), true) => Some(*v),
            _ => None,
        })
    }
}

/// System resource utilization snapshot, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceUtilization {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
}

impl ResourceUtilization {
    pub const IDLE: ResourceUtilization = ResourceUtilization { cpu: 0.0, mem: 0.0, io: 0.0 };

    pub fn get(&self, r: Resource) -> f64 {
        match r {
            Resource::Cpu => self.cpu,
            Resource::Mem => self.mem,
            Resource::Io => self.io,
        }
    }

    fn in_range(&self) -> bool {
        [self.cpu, self.mem, self.io].iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Number of cost components in a [`CostVector`].
pub const COST_COMPONENTS: usize = 10;

/// Names of the cost components in field order.
pub const COST_COMPONENT_NAMES: [&str; COST_COMPONENTS] = [
    "elapsed_time",
    "cpu_time",
    "cpu_cycles",
    "cpu_instructions",
    "cache_references",
    "cache_misses",
    "mem_avg",
    "mem_max",
    "io_blocks_read",
    "io_blocks_written",
];

/// Per-operator resource cost of processing one chunk. Seconds are decimal,
/// counters and byte sizes are integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CostVector {
    pub elapsed_time: f64,
    pub cpu_time: f64,
    pub cpu_cycles: u64,
    pub cpu_instructions: u64,
    pub cache_references: u64,
    pub cache_misses: u64,
    pub mem_avg: u64,
    pub mem_max: u64,
    pub io_blocks_read: u64,
    pub io_blocks_written: u64,
}

impl CostVector {
    pub fn to_array(&self) -> [f64; COST_COMPONENTS] {
        [
            self.elapsed_time,
            self.cpu_time,
            self.cpu_cycles as f64,
            self.cpu_instructions as f64,
            self.cache_references as f64,
            self.cache_misses as f64,
            self.mem_avg as f64,
            self.mem_max as f64,
            self.io_blocks_read as f64,
            self.io_blocks_written as f64,
        ]
    }

    /// Build from a float array, clamping negatives to zero and rounding the
    /// integer components.
    pub fn from_array(a: &[f64; COST_COMPONENTS]) -> CostVector {
        let f = |v: f64| v.max(0.0);
        let u = |v: f64| v.max(0.0).round() as u64;
        let mut out = CostVector {
            elapsed_time: f(a[0]),
            cpu_time: f(a[1]),
            cpu_cycles: u(a[2]),
            cpu_instructions: u(a[3]),
            cache_references: u(a[4]),
            cache_misses: u(a[5]),
            mem_avg: u(a[6]),
            mem_max: u(a[7]),
            io_blocks_read: u(a[8]),
            io_blocks_written: u(a[9]),
        };
        out.cache_misses = out.cache_misses.min(out.cache_references);
        out.mem_max = out.mem_max.max(out.mem_avg);
        out
    }

    fn invariant_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.elapsed_time >= 0.0) || !(self.cpu_time >= 0.0) {
            errs.push("negative time component".to_string());
        }
        if self.cache_misses > self.cache_references {
            errs.push(format!(
                "cache_misses {} > cache_references {}",
                self.cache_misses, self.cache_references
            ));
        }
        if self.mem_avg > self.mem_max {
            errs.push(format!("mem_avg {} > mem_max {}", self.mem_avg, self.mem_max));
        }
        errs
    }
}

/// Tracker execution modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceMode {
    FullCollection,
    Probe,
}

/// One data chunk's journey: the ordered operator ids that generated or
/// processed it (source to sink) and the aligned cost-record ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub chunk_id: u64,
    pub transform_addr: Vec<OperatorId>,
    pub record_addr: Vec<RecordId>,
}

/// Per-operator data captured by the tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorObservation {
    pub instance: OperatorInstance,
    /// Utilization snapshot taken before the operator first executed.
    pub utilization: ResourceUtilization,
}

/// One cost measurement: operator `operator_id` processing chunk `chunk_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub operator_id: OperatorId,
    pub chunk_id: u64,
    pub cost: CostVector,
}

/// A whole query execution trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: u64,
    pub template_id: u64,
    pub mode: TraceMode,
    pub chunks: Vec<ChunkTrace>,
    pub operators: BTreeMap<OperatorId, OperatorObservation>,
    pub records: BTreeMap<RecordId, CostRecord>,
    /// End-to-end latency in seconds; present only for labeled queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_latency: Option<f64>,
    /// Result-chunk budget the probe ran with; present only in probe mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_budget: Option<u32>,
}

impl QueryTrace {
    /// Measured cost of `op` on `chunk`, if recorded.
    pub fn cost_for(&self, op: OperatorId, chunk: u64) -> Option<&CostVector> {
        // record_addr is aligned with transform_addr, so scan the chunk's own
        // records rather than the whole table.
        let ct = self.chunks.iter().find(|c| c.chunk_id == chunk)?;
        let pos = ct.transform_addr.iter().position(|&o| o == op)?;
        let rid = *ct.record_addr.get(pos)?;
        self.records.get(&rid).map(|r| &r.cost)
    }

    /// All measured costs as a `(operator, chunk) -> cost` map.
    pub fn cost_map(&self) -> BTreeMap<(OperatorId, u64), CostVector> {
        self.records.values().map(|r| ((r.operator_id, r.chunk_id), r.cost)).collect()
    }

    /// Ids of the sink operators chunks terminate at (deduplicated).
    pub fn terminal_operator_ids(&self) -> Vec<OperatorId> {
        let mut ids: Vec<OperatorId> =
            self.chunks.iter().filter_map(|c| c.transform_addr.last().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// One violated invariant found by [`validate_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Field or invariant that failed.
    pub field: String,
    /// Chunk the violation was observed in, when chunk-scoped.
    pub chunk: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.chunk {
            Some(c) => write!(f, "[{} @ chunk {}] {}", self.field, c, self.message),
            None => write!(f, "[{}] {}", self.field, self.message),
        }
    }
}

fn violation(field: &str, chunk: Option<u64>, message: String) -> Violation {
    Violation { field: field.to_string(), chunk, message }
}

/// Check every structural invariant of a trace. Returns an empty list iff
/// the trace is well-formed; this is a diagnostic and never errors.
pub fn validate_trace(trace: &QueryTrace) -> Vec<Violation> {
    let mut out = Vec::new();

    for (id, obs) in &trace.operators {
        if *id != obs.instance.id {
            out.push(violation(
                "operators",
                None,
                format!("map key {} disagrees with instance id {}", id, obs.instance.id),
            ));
        }
        if obs.instance.input_cols < 1 {
            out.push(violation("input_cols", None, format!("{} has input_cols < 1", id)));
        }
        if !obs.utilization.in_range() {
            out.push(violation(
                "utilization",
                None,
                format!("{} utilization outside [0,1]", id),
            ));
        }
    }

    for chunk in &trace.chunks {
        let c = Some(chunk.chunk_id);
        if chunk.transform_addr.is_empty() {
            out.push(violation("transform_addr", c, "empty path".to_string()));
        }
        if chunk.transform_addr.len() != chunk.record_addr.len() {
            out.push(violation(
                "record_addr",
                c,
                format!(
                    "|transform_addr|={} but |record_addr|={}",
                    chunk.transform_addr.len(),
                    chunk.record_addr.len()
                ),
            ));
        }
        for pair in chunk.transform_addr.windows(2) {
            if pair[0] == pair[1] {
                out.push(violation(
                    "transform_addr",
                    c,
                    format!("immediate duplicate {}", pair[0]),
                ));
            }
        }
        for op in &chunk.transform_addr {
            if !trace.operators.contains_key(op) {
                out.push(violation(
                    "transform_addr",
                    c,
                    format!("unknown operator id {}", op),
                ));
            }
        }
        for (pos, rid) in chunk.record_addr.iter().enumerate() {
            match trace.records.get(rid) {
                None => out.push(violation(
                    "record_addr",
                    c,
                    format!("unknown record id {:?}", rid),
                )),
                Some(rec) => {
                    if rec.chunk_id != chunk.chunk_id {
                        out.push(violation(
                            "record_addr",
                            c,
                            format!("record {:?} belongs to chunk {}", rid, rec.chunk_id),
                        ));
                    }
                    if chunk.transform_addr.get(pos) != Some(&rec.operator_id) {
                        out.push(violation(
                            "record_addr",
                            c,
                            format!("record {:?} not aligned with transform_addr", rid),
                        ));
                    }
                }
            }
        }
    }

    for (rid, rec) in &trace.records {
        for msg in rec.cost.invariant_errors() {
            out.push(violation("cost", Some(rec.chunk_id), format!("record {:?}: {}", rid, msg)));
        }
        if !trace.operators.contains_key(&rec.operator_id) {
            out.push(violation(
                "records",
                Some(rec.chunk_id),
                format!("record {:?} references unknown operator {}", rid, rec.operator_id),
            ));
        }
    }

    if trace.mode == TraceMode::Probe {
        if let Some(budget) = trace.probe_budget {
            let sinks = trace.terminal_operator_ids();
            if sinks.len() == 1 {
                let results = trace
                    .chunks
                    .iter()
                    .filter(|c| c.transform_addr.last() == sinks.first())
                    .count();
                if results > budget as usize {
                    out.push(violation(
                        "probe_budget",
                        None,
                        format!("{} result chunks exceed probe budget {}", results, budget),
                    ));
                }
            }
        }
    }

    if let Some(lat) = trace.total_latency {
        if !(lat > 0.0) {
            out.push(violation("total_latency", None, format!("non-positive latency {lat}")));
        }
    }

    out
}

/// Write traces as JSONL, one object per line.
pub fn write_traces_jsonl<W: Write>(writer: W, traces: &[QueryTrace]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL trace file written by [`write_traces_jsonl`].
pub fn read_traces_jsonl<R: Read>(reader: R) -> Result<Vec<QueryTrace>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: QueryTrace = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidTrace(format!("line {}: {}", i + 1, e))
        })?;
        out.push(trace);
    }
    Ok(out)
}
