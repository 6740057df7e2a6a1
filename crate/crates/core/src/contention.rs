//! Resource-competition matrices and their attention-based adjustment.
//!
//! Operator types are classified by bound resource (CPU / memory / IO);
//! each resource gets a binary meta-competition matrix over the type
//! catalog. For a concrete data-flow tree the meta matrices are expanded to
//! node granularity, re-weighted by an attention score derived from the
//! tree adjacency, and fused with the adjacency into a single pipeline
//! matrix under learnable scalar weights. All adjustment and fusion steps
//! run on the gradient tape so the weights train with the downstream
//! predictor.

use crate::dataflow::DataFlowTree;
use crate::domain::{OperatorKind, Resource};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Binary competition matrices over the operator-type catalog, one per
/// resource. Entry `(a, b)` is 1 iff both types are bound on the resource;
/// the diagonal is kept, since instances of one type contend with each
/// other too.
#[derive(Debug, Clone)]
pub struct MetaCompetitionMatrices {
    pub cpu: Tensor,
    pub mem: Tensor,
    pub io: Tensor,
}

impl MetaCompetitionMatrices {
    pub fn get(&self, r: Resource) -> &Tensor {
        match r {
            Resource::Cpu => &self.cpu,
            Resource::Mem => &self.mem,
            Resource::Io => &self.io,
        }
    }
}

/// Learnable fusion weights combining the adjacency with the adjusted
/// competition matrices.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub w_f: Tensor,
    pub w_cpu: Tensor,
    pub w_mem: Tensor,
    pub w_io: Tensor,
}

impl FusionWeights {
    /// Constant (inference-time) weights.
    pub fn constants(values: [f64; 4]) -> FusionWeights {
        let [f, c, m, io] = values;
        FusionWeights {
            w_f: Tensor::scalar(f),
            w_cpu: Tensor::scalar(c),
            w_mem: Tensor::scalar(m),
            w_io: Tensor::scalar(io),
        }
    }

    /// Trainable weights.
    pub fn leaves(values: [f64; 4]) -> FusionWeights {
        let mk = |v: f64| Tensor::leaf(1, 1, vec![v]).expect("1x1 leaf");
        FusionWeights {
            w_f: mk(values[0]),
            w_cpu: mk(values[1]),
            w_mem: mk(values[2]),
            w_io: mk(values[3]),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [
            self.w_f.to_vec()[0],
            self.w_cpu.to_vec()[0],
            self.w_mem.to_vec()[0],
            self.w_io.to_vec()[0],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_f, &self.w_cpu, &self.w_mem, &self.w_io]
    }
}

/// Build the per-resource meta-competition matrices for a type catalog.
pub fn build_meta_matrices(catalog: &[OperatorKind]) -> MetaCompetitionMatrices {
    let m = catalog.len();
    let build = |r: Resource| {
        let mut data = vec![0.0; m * m];
        for (i, a) in catalog.iter().enumerate() {
            for (j, b) in catalog.iter().enumerate() {
                if a.is_bound_on(r) && b.is_bound_on(r) {
                    data[i * m + j] = 1.0;
                }
            }
        }
        Tensor::from_vec(m, m, data).expect("square meta matrix")
    };
    MetaCompetitionMatrices { cpu: build(Resource::Cpu), mem: build(Resource::Mem), io: build(Resource::Io) }
}

/// Expand the meta matrices to node granularity: entry `(i, j)` of each
/// expanded matrix is the meta entry for the types of tree nodes `i` and
/// `j` in BFS order.
pub fn expand_to_pipeline(
    meta: &MetaCompetitionMatrices,
    tree: &DataFlowTree,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = tree.len();
    if n == 0 {
        return Err(Error::InvalidTrace("cannot expand matrices for an empty tree".to_string()));
    }
    let m = meta.cpu.rows();
    let kinds: Vec<usize> = tree.nodes_bfs().map(|node| node.op_type.index()).collect();
    for &k in &kinds {
        if k >= m {
            return Err(Error::InvalidTrace(format!("operator type index {k} outside catalog")));
        }
    }
    let expand = |meta: &Tensor| {
        let mv = meta.values();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = mv[kinds[i] * m + kinds[j]];
            }
        }
        Tensor::from_vec(n, n, data)
    };
    Ok((expand(&meta.cpu)?, expand(&meta.mem)?, expand(&meta.io)?))
}

/// Attention adjustment of one expanded competition matrix against the
/// data-flow adjacency:
///
/// `adjusted = row_softmax(competition @ adjacency^T / sqrt(N)) @ competition`
///
/// The softmax runs independently per row, so every attention row is a
/// convex weighting over the competition rows.
pub fn attention_adjust(competition: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
    let n = competition.rows();
    if n == 0 {
        return Err(Error::Shape("attention_adjust on empty matrix".to_string()));
    }
    if competition.shape() != adjacency.shape() || competition.rows() != competition.cols() {
        return Err(Error::Shape(format!(
            "attention_adjust needs equal square matrices, got {:?} and {:?}",
            competition.shape(),
            adjacency.shape()
        )));
    }
    let scores = competition
        .matmul(&adjacency.transpose()?)?
        .scale(1.0 / (n as f64).sqrt())?;
    scores.row_softmax()?.matmul(competition)
}

/// Weighted fusion of the adjacency and the three adjusted competition
/// matrices into the final pipeline matrix.
pub fn fuse_pipeline(
    adjacency: &Tensor,
    adjusted: [&Tensor; 3],
    weights: &FusionWeights,
) -> Result<Tensor> {
    for m in adjusted {
        if m.shape() != adjacency.shape() {
            return Err(Error::Shape(format!(
                "fuse_pipeline: {:?} vs adjacency {:?}",
                m.shape(),
                adjacency.shape()
            )));
        }
    }
    adjacency
        .scale_by(&weights.w_f)?
        .add(&adjusted[0].scale_by(&weights.w_cpu)?)?
        .add(&adjusted[1].scale_by(&weights.w_mem)?)?
        .add(&adjusted[2].scale_by(&weights.w_io)?)
}
