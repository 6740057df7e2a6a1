//! Seeded workload generation.
//!
//! A template fixes the distributions a family of queries is drawn from
//! (chain depth, join count, table sizes, parameter ranges); the generator
//! expands a template into concrete pipeline specs. Identical
//! `(template, n_queries, seed)` always yields identical specs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{OperatorId, OperatorInstance, OperatorKind, OperatorParam};
use crate::tracesim::spec::{
    apply_modification, ModificationAction, ModificationEvent, PipelineSpec,
};
use crate::{Error, Result};

/// Generation parameters for one query family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTemplate {
    pub template_id: u64,
    /// Total main-chain length including the scan and the sink; min 2.
    pub depth: (u32, u32),
    pub joins: (u32, u32),
    pub table_rows: (u64, u64),
    pub columns: (u32, u32),
    pub selectivity: (f64, f64),
    pub join_multiplier: (f64, f64),
    pub group_counts: (u64, u64),
    pub dop: (u32, u32),
    /// Probability that a query carries a latent dynamic modification.
    pub modification_prob: f64,
}

impl WorkloadTemplate {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |lo: f64, hi: f64, what: &str| {
            if lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} range [{lo}, {hi}] is empty")))
            }
        };
        range_ok(f64::from(self.depth.0), f64::from(self.depth.1), "depth")?;
        range_ok(f64::from(self.joins.0), f64::from(self.joins.1), "joins")?;
        range_ok(self.table_rows.0 as f64, self.table_rows.1 as f64, "table_rows")?;
        range_ok(f64::from(self.columns.0), f64::from(self.columns.1), "columns")?;
        range_ok(self.selectivity.0, self.selectivity.1, "selectivity")?;
        range_ok(self.join_multiplier.0, self.join_multiplier.1, "join_multiplier")?;
        range_ok(self.group_counts.0 as f64, self.group_counts.1 as f64, "group_counts")?;
        range_ok(f64::from(self.dop.0), f64::from(self.dop.1), "dop")?;
        if self.depth.0 < 2 {
            return Err(Error::Config(
                "depth must be at least 2 (a scan and a sink)".to_string(),
            ));
        }
        if self.columns.0 < 1 {
            return Err(Error::Config("columns must be at least 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.modification_prob) {
            return Err(Error::Config("modification_prob must be in [0, 1]".to_string()));
        }
        if self.selectivity.0 <= 0.0 || self.selectivity.1 > 1.0 {
            return Err(Error::Config("selectivity must lie in (0, 1]".to_string()));
        }
        if self.table_rows.0 == 0 {
            return Err(Error::Config("table_rows must be positive".to_string()));
        }
        Ok(())
    }

    /// A family of 20-odd distinguishable templates derived from global
    /// bounds; each template narrows the global ranges deterministically.
    pub fn derive(template_id: u64, bounds: &WorkloadTemplate) -> WorkloadTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(bounds.template_id);
        rng.set_stream(0x7E4 ^ template_id);
        let narrow_u = |rng: &mut ChaCha8Rng, (lo, hi): (u64, u64)| -> (u64, u64) {
            if lo >= hi {
                return (lo, hi);
            }
            let a = rng.gen_range(lo..=hi);
            let b = rng.gen_range(lo..=hi);
            (a.min(b), a.max(b).max(a.min(b) + (hi - lo) / 4).min(hi))
        };
        let narrow_u32 = |rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)| -> (u32, u32) {
            let (a, b) = narrow_u(rng, (u64::from(lo), u64::from(hi)));
            (a as u32, b as u32)
        };
        let narrow_f = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| -> (f64, f64) {
            if lo >= hi {
                return (lo, hi);
            }
            let a = rng.gen_range(lo..=hi);
            let b = rng.gen_range(lo..=hi);
            (a.min(b), a.max(b))
        };
        WorkloadTemplate {
            template_id,
            depth: narrow_u32(&mut rng, bounds.depth),
            joins: narrow_u32(&mut rng, bounds.joins),
            table_rows: narrow_u(&mut rng, bounds.table_rows),
            columns: narrow_u32(&mut rng, bounds.columns),
            selectivity: narrow_f(&mut rng, bounds.selectivity),
            join_multiplier: narrow_f(&mut rng, bounds.join_multiplier),
            group_counts: narrow_u(&mut rng, bounds.group_counts),
            dop: bounds.dop,
            modification_prob: bounds.modification_prob,
        }
    }
}

impl Default for WorkloadTemplate {
    fn default() -> Self {
        WorkloadTemplate {
            template_id: 0,
            depth: (3, 8),
            joins: (0, 2),
            table_rows: (2_048, 16_384),
            columns: (3, 16),
            selectivity: (0.15, 0.9),
            join_multiplier: (0.3, 1.5),
            group_counts: (16, 512),
            dop: (1, 4),
            modification_prob: 0.35,
        }
    }
}

struct Builder {
    next_id: u64,
    nodes: Vec<OperatorInstance>,
    edges: Vec<(OperatorId, OperatorId)>,
    sources: Vec<OperatorId>,
    dop: BTreeMap<OperatorId, u32>,
}

impl Builder {
    fn fresh_id(&mut self) -> OperatorId {
        let id = OperatorId(self.next_id);
        self.next_id += 1;
        id
    }

    fn push(
        &mut self,
        kind: OperatorKind,
        params: Vec<OperatorParam>,
        rows: u64,
        cols: u32,
        dop: u32,
    ) -> OperatorId {
        let id = self.fresh_id();
        self.nodes.push(OperatorInstance {
            id,
            op_type: kind,
            params,
            input_rows: rows,
            input_cols: cols,
        });
        self.dop.insert(id, dop);
        id
    }
}

fn middle_kind(rng: &mut ChaCha8Rng) -> OperatorKind {
    use OperatorKind::*;
    let weighted = [
        (Filter, 20u32),
        (Expression, 20),
        (Aggregate, 15),
        (PartialSort, 12),
        (Exchange, 15),
        (MergeSort, 8),
        (Limit, 10),
    ];
    let total: u32 = weighted.iter().map(|(_, w)| w).sum();
    let mut pick = rng.gen_range(0..total);
    for (kind, w) in weighted {
        if pick < w {
            return kind;
        }
        pick -= w;
    }
    Filter
}

fn params_for(
    kind: OperatorKind,
    t: &WorkloadTemplate,
    rng: &mut ChaCha8Rng,
) -> Vec<OperatorParam> {
    use OperatorKind::*;
    match kind {
        Scan => vec![OperatorParam::categorical(
            "compression",
            if rng.gen_bool(0.5) { "lz4" } else { "none" },
        )],
        Filter => vec![OperatorParam::numeric(
            "selectivity",
            rng.gen_range(t.selectivity.0..=t.selectivity.1),
        )],
        Expression => vec![OperatorParam::numeric("exprs", f64::from(rng.gen_range(1..=4u32)))],
        Aggregate => vec![OperatorParam::numeric(
            "groups",
            rng.gen_range(t.group_counts.0..=t.group_counts.1) as f64,
        )],
        PartialSort | MergeSort => {
            vec![OperatorParam::numeric("sort_cols", f64::from(rng.gen_range(1..=4u32)))]
        }
        Exchange => vec![OperatorParam::numeric("partitions", f64::from(rng.gen_range(2..=8u32)))],
        Limit => vec![OperatorParam::numeric("limit", f64::from(rng.gen_range(100..=5000u32)))],
        HashJoin | MergeJoin | Sink => vec![],
    }
}

/// Expand a template into `n_queries` pipeline specs.
pub fn generate_workload(
    template: &WorkloadTemplate,
    n_queries: u64,
    seed: u64,
) -> Result<Vec<PipelineSpec>> {
    template.validate()?;
    if n_queries < 1 {
        return Err(Error::Config("n_queries must be >= 1".to_string()));
    }
    (0..n_queries).map(|i| generate_query(template, i, seed)).collect()
}

fn estimated_out_rows(inst: &OperatorInstance) -> u64 {
    crate::tracesim::spec::output_rows(inst, inst.input_rows)
}

fn generate_query(t: &WorkloadTemplate, index: u64, seed: u64) -> Result<PipelineSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((t.template_id << 40) ^ index);

    let mut b = Builder {
        next_id: 0,
        nodes: Vec::new(),
        edges: Vec::new(),
        sources: Vec::new(),
        dop: BTreeMap::new(),
    };

    let depth = rng.gen_range(t.depth.0..=t.depth.1) as usize;
    let n_joins = rng.gen_range(t.joins.0..=t.joins.1) as usize;
    let table_rows = rng.gen_range(t.table_rows.0..=t.table_rows.1);
    let cols = rng.gen_range(t.columns.0..=t.columns.1);
    let dop_of = |rng: &mut ChaCha8Rng, kind: OperatorKind| -> u32 {
        match kind {
            OperatorKind::Sink => 1,
            OperatorKind::Scan => rng.gen_range(t.dop.0..=t.dop.1).min(2),
            _ => rng.gen_range(t.dop.0..=t.dop.1),
        }
    };

    // Main chain: Scan, then depth-2 middle operators (the first always a
    // filter), then Sink.
    let mut chain_kinds = vec![OperatorKind::Scan];
    for mid in 0..depth.saturating_sub(2) {
        chain_kinds.push(if mid == 0 { OperatorKind::Filter } else { middle_kind(&mut rng) });
    }
    chain_kinds.push(OperatorKind::Sink);

    let mut chain_ids = Vec::with_capacity(chain_kinds.len());
    let mut rows = table_rows;
    let width = cols;
    for &kind in &chain_kinds {
        let params = params_for(kind, t, &mut rng);
        let dop = dop_of(&mut rng, kind);
        let id = b.push(kind, params, rows, width, dop);
        rows = estimated_out_rows(b.nodes.last().unwrap());
        chain_ids.push(id);
    }
    b.sources.push(chain_ids[0]);
    for w in chain_ids.windows(2) {
        b.edges.push((w[0], w[1]));
    }

    // Joins: splice each into a distinct main-chain edge (never directly at
    // the scan) and hang a side scan chain off it.
    let spliceable = chain_ids.len() - 1;
    let n_joins = n_joins.min(spliceable.saturating_sub(1));
    let mut slots: Vec<usize> = (1..spliceable).collect();
    for _ in 0..n_joins {
        let slot_pos = rng.gen_range(0..slots.len());
        let slot = slots.remove(slot_pos);
        let (u, v) = (chain_ids[slot], chain_ids[slot + 1]);

        let side_rows = rng.gen_range(t.table_rows.0..=t.table_rows.1);
        let side_cols = rng.gen_range(t.columns.0..=t.columns.1);
        let side_scan = b.push(
            OperatorKind::Scan,
            params_for(OperatorKind::Scan, t, &mut rng),
            side_rows,
            side_cols,
            dop_of(&mut rng, OperatorKind::Scan),
        );
        b.sources.push(side_scan);
        let mut side_tail = side_scan;
        let mut side_out = side_rows;
        if rng.gen_bool(0.5) {
            let f = b.push(
                OperatorKind::Filter,
                params_for(OperatorKind::Filter, t, &mut rng),
                side_out,
                side_cols,
                dop_of(&mut rng, OperatorKind::Filter),
            );
            b.edges.push((side_tail, f));
            side_out = estimated_out_rows(b.nodes.last().unwrap());
            side_tail = f;
        }

        let kind =
            if rng.gen_bool(0.75) { OperatorKind::HashJoin } else { OperatorKind::MergeJoin };
        let mult = rng.gen_range(t.join_multiplier.0..=t.join_multiplier.1);
        let main_rows = b.node(u).map_or(table_rows, estimated_out_rows);
        let join_params = vec![
            OperatorParam::numeric("multiplier", mult),
            OperatorParam::categorical(
                "algo",
                if kind == OperatorKind::HashJoin { "hash" } else { "merge" },
            ),
        ];
        let main_cols = b.node(u).map_or(width, |n| n.input_cols);
        let join = b.push(
            kind,
            join_params,
            main_rows + side_out,
            main_cols + side_cols,
            dop_of(&mut rng, kind),
        );
        let pos = b.edges.iter().position(|&e| e == (u, v)).expect("chain edge");
        b.edges.remove(pos);
        b.edges.push((u, join));
        b.edges.push((side_tail, join));
        b.edges.push((join, v));
    }

    // Latent dynamic modification.
    let mut modifications = Vec::new();
    if rng.gen_bool(t.modification_prob) {
        let trigger_chunk = rng.gen_range(1..=3u64);
        let hash_joins: Vec<&OperatorInstance> =
            b.nodes.iter().filter(|n| n.op_type == OperatorKind::HashJoin).collect();
        if !hash_joins.is_empty() {
            let target = hash_joins[rng.gen_range(0..hash_joins.len())].clone();
            let mut next = b.next_id;
            let mut mk = |kind: OperatorKind, params: Vec<OperatorParam>, rows: u64, cols: u32| {
                let inst = OperatorInstance {
                    id: OperatorId(next),
                    op_type: kind,
                    params,
                    input_rows: rows,
                    input_cols: cols,
                };
                next += 1;
                inst
            };
            let new_join = mk(
                OperatorKind::MergeJoin,
                vec![
                    OperatorParam::numeric(
                        "multiplier",
                        target.numeric_param("multiplier").unwrap_or(1.0),
                    ),
                    OperatorParam::categorical("algo", "merge"),
                ],
                target.input_rows,
                target.input_cols,
            );
            let producers: usize = b.edges.iter().filter(|(_, c)| *c == target.id).count();
            let mut inserted = vec![new_join];
            for _ in 0..producers {
                inserted.push(mk(
                    OperatorKind::MergeSort,
                    vec![OperatorParam::numeric("sort_cols", 1.0)],
                    target.input_rows / 2,
                    target.input_cols,
                ));
            }
            modifications.push(ModificationEvent {
                trigger_chunk,
                action: ModificationAction::ReplaceJoinAlgo,
                affected: vec![target.id],
                inserted,
            });
        } else {
            // no join to replace: splice a sort in front of a random
            // non-source operator
            let candidates: Vec<(OperatorId, OperatorId)> = b.edges.clone();
            let (u, v) = candidates[rng.gen_range(0..candidates.len())];
            let rows = b.node(v).map_or(table_rows, |n| n.input_rows);
            let colsv = b.node(v).map_or(width, |n| n.input_cols);
            let inst = OperatorInstance {
                id: OperatorId(b.next_id),
                op_type: OperatorKind::PartialSort,
                params: vec![OperatorParam::numeric("sort_cols", 1.0)],
                input_rows: rows,
                input_cols: colsv,
            };
            modifications.push(ModificationEvent {
                trigger_chunk,
                action: ModificationAction::InsertOperators,
                affected: vec![u, v],
                inserted: vec![inst],
            });
        }
    }

    let spec = PipelineSpec {
        query_id: index,
        template_id: t.template_id,
        nodes: b.nodes,
        edges: b.edges,
        sources: b.sources,
        sink: *chain_ids.last().unwrap(),
        dop: b.dop,
        modifications,
    };
    spec.validate()?;
    for event in &spec.modifications {
        apply_modification(&spec, event)?;
    }
    Ok(spec)
}

impl Builder {
    fn node(&self, id: OperatorId) -> Option<&OperatorInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }
}
