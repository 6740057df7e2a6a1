//! Property tests for data-flow tree construction and trace round-trips.

mod common;

use proptest::prelude::*;
use qpp_core::dataflow::{build_dataflow_tree, orient_paths, tree_from_trace, DataFlowTree};
use qpp_core::domain::{read_traces_jsonl, write_traces_jsonl, OperatorId, OperatorKind};

/// Naive reference trie built by per-path insertion over nested maps.
#[derive(Default, Debug, PartialEq)]
struct RefTrie {
    multiplicity: u64,
    terminal: u64,
    children: Vec<(u64, RefTrie)>, // insertion order
}

impl RefTrie {
    fn insert(&mut self, path: &[u64]) {
        self.multiplicity += 1;
        match path.split_first() {
            None => self.terminal += 1,
            Some((&head, rest)) => {
                let child = match self.children.iter_mut().find(|(id, _)| *id == head) {
                    Some((_, c)) => c,
                    None => {
                        self.children.push((head, RefTrie::default()));
                        &mut self.children.last_mut().unwrap().1
                    }
                };
                child.insert(rest);
            }
        }
    }

    fn build(paths: &[Vec<u64>]) -> RefTrie {
        let mut root = RefTrie::default();
        for p in paths {
            root.insert(&p[1..]); // first element is the shared root
        }
        root
    }

    fn node_count(&self) -> usize {
        1 + self.children.iter().map(|(_, c)| c.node_count()).sum::<usize>()
    }
}

/// Compare the arena tree against the reference trie structurally.
fn assert_same_shape(tree: &DataFlowTree, reference: &RefTrie) {
    fn walk(tree: &DataFlowTree, bfs: usize, node: &RefTrie) {
        let flow = tree.node(bfs);
        assert_eq!(flow.multiplicity, node.multiplicity, "multiplicity at {bfs}");
        assert_eq!(flow.terminal_count, node.terminal, "terminal count at {bfs}");
        let kids = tree.children_bfs(bfs);
        assert_eq!(kids.len(), node.children.len(), "fanout at {bfs}");
        for (kid_bfs, (id, kid_ref)) in kids.iter().zip(&node.children) {
            assert_eq!(tree.node(*kid_bfs).operator_id.0, *id, "child id at {bfs}");
            walk(tree, *kid_bfs, kid_ref);
        }
    }
    assert_eq!(tree.len(), reference.node_count());
    walk(tree, 0, reference);
}

fn ids(path: &[u64]) -> Vec<OperatorId> {
    path.iter().map(|&i| OperatorId(i)).collect()
}

fn any_kind(_: OperatorId) -> Option<OperatorKind> {
    Some(OperatorKind::Exchange)
}

/// Paths over a small alphabet sharing a fixed root, no immediate repeats.
fn path_set(max_paths: usize, max_len: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(
        prop::collection::vec(1u64..8, 0..max_len).prop_map(|tail| {
            let mut path = vec![0u64];
            for t in tail {
                if *path.last().unwrap() != t {
                    path.push(t);
                }
            }
            path
        }),
        1..=max_paths,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn construction_matches_the_naive_trie_oracle(paths in path_set(30, 10)) {
        let tree = build_dataflow_tree(&paths.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();
        let reference = RefTrie::build(&paths);
        assert_same_shape(&tree, &reference);
    }

    /// Shuffling path order never changes the node set, multiplicities, or
    /// parent/child relations; only sibling order may move.
    #[test]
    fn construction_is_stable_under_path_permutation(
        paths in path_set(20, 8),
        seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let tree_a = build_dataflow_tree(&paths.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();
        let mut shuffled = paths.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let tree_b = build_dataflow_tree(&shuffled.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();

        prop_assert_eq!(tree_a.len(), tree_b.len());
        // canonical forms coincide entirely
        let canon_a = tree_a.canonicalized();
        let canon_b = tree_b.canonicalized();
        let shape = |t: &DataFlowTree| -> Vec<(u64, u64, u64, Vec<usize>)> {
            (0..t.len())
                .map(|i| {
                    let n = t.node(i);
                    (n.operator_id.0, n.multiplicity, n.terminal_count, t.children_bfs(i))
                })
                .collect()
        };
        prop_assert_eq!(shape(&canon_a), shape(&canon_b));
    }

    /// Inserting a path set twice doubles multiplicities and nothing else.
    #[test]
    fn duplicate_insertion_only_scales_multiplicities(paths in path_set(15, 8)) {
        let once = build_dataflow_tree(&paths.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();
        let mut doubled = paths.clone();
        doubled.extend(paths.iter().cloned());
        let twice = build_dataflow_tree(&doubled.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();

        prop_assert_eq!(once.len(), twice.len());
        for i in 0..once.len() {
            let (a, b) = (once.node(i), twice.node(i));
            prop_assert_eq!(a.operator_id, b.operator_id);
            prop_assert_eq!(2 * a.multiplicity, b.multiplicity);
            prop_assert_eq!(once.children_bfs(i), twice.children_bfs(i));
        }
    }

    /// Terminations over all nodes account for every path; on prefix-free
    /// inputs every terminating node is a leaf.
    #[test]
    fn path_terminations_are_conserved(paths in path_set(20, 8)) {
        let tree = build_dataflow_tree(&paths.iter().map(|p| ids(p)).collect::<Vec<_>>(), &any_kind).unwrap();
        let total: u64 = tree.nodes_bfs().map(|n| n.terminal_count).sum();
        prop_assert_eq!(total as usize, paths.len());

        let prefix_free = paths.iter().all(|a| {
            paths.iter().all(|b| a == b || !(a.len() < b.len() && b[..a.len()] == a[..]))
        });
        if prefix_free {
            for node in tree.nodes_bfs() {
                if node.terminal_count > 0 {
                    prop_assert!(node.children.is_empty());
                }
            }
        }
    }
}

#[test]
fn orientation_reverses_paths_to_a_shared_sink_root() {
    let setup = common::Setup::small();
    let data = setup.build();
    for trace in data.probe_labeled.iter().take(20) {
        let oriented = orient_paths(trace).unwrap();
        for (path, chunk) in oriented.iter().zip(&trace.chunks) {
            let mut reversed = chunk.transform_addr.clone();
            reversed.reverse();
            assert_eq!(path, &reversed);
        }
        let first = oriented[0][0];
        assert!(oriented.iter().all(|p| p[0] == first));
        // and the tree builds from every valid probe trace
        let tree = tree_from_trace(trace).unwrap();
        assert_eq!(tree.root().operator_id, first);
    }
}

#[test]
fn traces_from_the_simulator_round_trip_byte_stably() {
    let setup = common::Setup::small();
    let data = setup.build();
    for batch in [&data.serial[..6], &data.probe_labeled[..6]] {
        let mut bytes = Vec::new();
        write_traces_jsonl(&mut bytes, batch).unwrap();
        let back = read_traces_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(batch, &back[..]);
        let mut bytes2 = Vec::new();
        write_traces_jsonl(&mut bytes2, &back).unwrap();
        assert_eq!(bytes, bytes2);
    }
}
