//! Data-flow tree construction from chunk execution paths.
//!
//! Each chunk's path is oriented so the pipeline sink becomes the shared
//! first element, then all paths are merged into a trie: two path prefixes
//! share a node iff they are element-wise equal. Pipelines that were
//! modified mid-execution show up as extra branches instead of being lost,
//! so one tree can express every pipeline variant the chunks saw.

use std::collections::BTreeMap;

use crate::domain::{CostVector, OperatorId, OperatorKind, QueryTrace, COST_COMPONENTS};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One node of a [`DataFlowTree`], stored in an arena.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNode {
    pub operator_id: OperatorId,
    pub op_type: OperatorKind,
    /// Arena indices of children, in insertion order.
    pub children: Vec<usize>,
    /// Number of input paths whose prefix reaches this node.
    pub multiplicity: u64,
    /// Indices (into the input path list) of the paths traversing this node.
    pub path_refs: Vec<usize>,
    /// Number of input paths that terminate exactly here.
    pub terminal_count: u64,
}

/// Trie of oriented chunk execution paths.
///
/// `node_index` order is deterministic: root first, then breadth-first with
/// children in their stored order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFlowTree {
    nodes: Vec<FlowNode>,
    root: usize,
    /// `node_index[i]` is the arena index of the i-th node in BFS order.
    node_index: Vec<usize>,
}

impl DataFlowTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &FlowNode {
        &self.nodes[self.root]
    }

    /// Node at BFS position `i`.
    pub fn node(&self, i: usize) -> &FlowNode {
        &self.nodes[self.node_index[i]]
    }

    /// All nodes in BFS order.
    pub fn nodes_bfs(&self) -> impl Iterator<Item = &FlowNode> {
        self.node_index.iter().map(|&i| &self.nodes[i])
    }

    /// BFS position of each node's parent; the root has none.
    pub fn parents_bfs(&self) -> Vec<Option<usize>> {
        let arena_to_bfs = self.arena_to_bfs();
        let mut parents = vec![None; self.nodes.len()];
        for (bfs, &arena) in self.node_index.iter().enumerate() {
            for &child in &self.nodes[arena].children {
                parents[arena_to_bfs[child]] = Some(bfs);
            }
        }
        parents
    }

    /// Children of the node at BFS position `i`, as BFS positions.
    pub fn children_bfs(&self, i: usize) -> Vec<usize> {
        let arena_to_bfs = self.arena_to_bfs();
        self.nodes[self.node_index[i]].children.iter().map(|&c| arena_to_bfs[c]).collect()
    }

    fn arena_to_bfs(&self) -> Vec<usize> {
        let mut map = vec![0usize; self.nodes.len()];
        for (bfs, &arena) in self.node_index.iter().enumerate() {
            map[arena] = bfs;
        }
        map
    }

    fn rebuild_index(&mut self) {
        self.node_index.clear();
        let mut queue = std::collections::VecDeque::from([self.root]);
        while let Some(i) = queue.pop_front() {
            self.node_index.push(i);
            queue.extend(self.nodes[i].children.iter().copied());
        }
        debug_assert_eq!(self.node_index.len(), self.nodes.len());
    }

    /// A copy of the tree with every node's children reordered by operator
    /// id. The result no longer depends on path insertion order, which makes
    /// anything derived from BFS positions stable under chunk reordering.
    pub fn canonicalized(&self) -> DataFlowTree {
        let mut out = self.clone();
        for node in &mut out.nodes {
            let ops: &Vec<FlowNode> = &self.nodes;
            node.children.sort_by_key(|&c| ops[c].operator_id);
        }
        out.rebuild_index();
        out
    }

    /// Dense adjacency matrix in BFS order: entry `(i, j)` is 1 iff node `j`
    /// is a child of node `i`.
    pub fn to_adjacency(&self) -> Tensor {
        let n = self.len();
        let arena_to_bfs = self.arena_to_bfs();
        let mut data = vec![0.0; n * n];
        for (i, &arena) in self.node_index.iter().enumerate() {
            for &child in &self.nodes[arena].children {
                data[i * n + arena_to_bfs[child]] = 1.0;
            }
        }
        Tensor::from_vec(n, n, data).expect("square adjacency")
    }

    /// Graphviz DOT rendering for debugging.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph dataflow {\n");
        for (i, node) in self.nodes_bfs().enumerate() {
            s.push_str(&format!(
                "  n{} [label=\"{} {} x{}\"];\n",
                i, node.op_type, node.operator_id, node.multiplicity
            ));
        }
        for (i, _) in self.node_index.iter().enumerate() {
            for c in self.children_bfs(i) {
                s.push_str(&format!("  n{} -> n{};\n", i, c));
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Reverse each chunk's `transform_addr` so the pipeline sink becomes the
/// shared first element. Errors when chunks terminate at different
/// operators (no single-rooted tree exists).
pub fn orient_paths(trace: &QueryTrace) -> Result<Vec<Vec<OperatorId>>> {
    let sinks = trace.terminal_operator_ids();
    if sinks.len() > 1 {
        return Err(Error::InvalidTrace(format!(
            "chunks terminate at {} distinct operators ({:?}); cannot form a single-rooted tree",
            sinks.len(),
            sinks
        )));
    }
    Ok(trace
        .chunks
        .iter()
        .map(|c| c.transform_addr.iter().rev().copied().collect())
        .collect())
}

/// Merge oriented paths into a trie. Requires a non-empty path list whose
/// paths are non-empty and share the same first element.
///
/// `kind_of` supplies the operator type for each id (node labels).
pub fn build_dataflow_tree(
    paths: &[Vec<OperatorId>],
    kind_of: &dyn Fn(OperatorId) -> Option<OperatorKind>,
) -> Result<DataFlowTree> {
    if paths.is_empty() {
        return Err(Error::InvalidTrace("no execution paths to merge".to_string()));
    }
    let root_op = *paths[0]
        .first()
        .ok_or_else(|| Error::InvalidTrace("empty execution path".to_string()))?;
    let lookup = |id: OperatorId| {
        kind_of(id).ok_or_else(|| Error::InvalidTrace(format!("no operator type for {id}")))
    };

    let mut tree = DataFlowTree {
        nodes: vec![FlowNode {
            operator_id: root_op,
            op_type: lookup(root_op)?,
            children: Vec::new(),
            multiplicity: 0,
            path_refs: Vec::new(),
            terminal_count: 0,
        }],
        root: 0,
        node_index: Vec::new(),
    };

    for (path_idx, path) in paths.iter().enumerate() {
        let first = *path
            .first()
            .ok_or_else(|| Error::InvalidTrace(format!("path {path_idx} is empty")))?;
        if first != root_op {
            return Err(Error::InvalidTrace(format!(
                "path {path_idx} starts at {first} but the root is {root_op}"
            )));
        }
        let mut cursor = tree.root;
        tree.nodes[cursor].multiplicity += 1;
        tree.nodes[cursor].path_refs.push(path_idx);
        for &op in &path[1..] {
            // Match among existing children; append exactly one new node
            // only if none matches.
            let found = tree.nodes[cursor]
                .children
                .iter()
                .copied()
                .find(|&c| tree.nodes[c].operator_id == op);
            cursor = match found {
                Some(c) => c,
                None => {
                    let idx = tree.nodes.len();
                    tree.nodes.push(FlowNode {
                        operator_id: op,
                        op_type: lookup(op)?,
                        children: Vec::new(),
                        multiplicity: 0,
                        path_refs: Vec::new(),
                        terminal_count: 0,
                    });
                    tree.nodes[cursor].children.push(idx);
                    idx
                }
            };
            tree.nodes[cursor].multiplicity += 1;
            tree.nodes[cursor].path_refs.push(path_idx);
        }
        tree.nodes[cursor].terminal_count += 1;
    }

    tree.rebuild_index();
    Ok(tree)
}

/// Convenience: orient a trace's chunk paths and merge them.
pub fn tree_from_trace(trace: &QueryTrace) -> Result<DataFlowTree> {
    let paths = orient_paths(trace)?;
    build_dataflow_tree(&paths, &|id| trace.operators.get(&id).map(|o| o.instance.op_type))
}

/// Per-node aggregated cost vectors in BFS order: each node's cost is the
/// component-wise mean over the chunks traversing it.
///
/// `costs` maps `(operator_id, chunk_id)` to a measured or predicted cost;
/// a node with no matching record is an error.
pub fn attach_costs(
    tree: &DataFlowTree,
    trace: &QueryTrace,
    costs: &BTreeMap<(OperatorId, u64), CostVector>,
) -> Result<Vec<CostVector>> {
    let mut out = Vec::with_capacity(tree.len());
    for node in tree.nodes_bfs() {
        let mut acc = [0.0; COST_COMPONENTS];
        let mut found = 0usize;
        for &path_idx in &node.path_refs {
            let chunk_id = trace
                .chunks
                .get(path_idx)
                .ok_or_else(|| {
                    Error::InvalidTrace(format!("path ref {path_idx} out of range"))
                })?
                .chunk_id;
            if let Some(c) = costs.get(&(node.operator_id, chunk_id)) {
                for (a, v) in acc.iter_mut().zip(c.to_array()) {
                    *a += v;
                }
                found += 1;
            }
        }
        if found == 0 {
            return Err(Error::InvalidTrace(format!(
                "no cost records for {} ({})",
                node.operator_id, node.op_type
            )));
        }
        for a in acc.iter_mut() {
            *a /= found as f64;
        }
        out.push(CostVector::from_array(&acc));
    }
    Ok(out)
}
