//! Tree convolution over calibrated node vectors.
//!
//! Each layer slides a depth-2 window (a node plus its direct children)
//! over the tree. The filter for a window position is a coefficient blend
//! of three weight matrices; coefficients interpolate between the window
//! top and the left/right extremes of the child list. Three layers run
//! bottom-up with residual connections, then a readout MLP maps the root
//! vector to the normalized latency scalar.

use serde::{Deserialize, Serialize};

use crate::dataflow::DataFlowTree;
use crate::models::mlp::{MatrixData, MlpParams, MlpTensors};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Window blend coefficients `(top, left, right)` for a node at depth
/// `d_i` (counted from the window bottom, the window top having `d_i = d`)
/// and sibling position `p_i` of `n`.
///
/// Degenerate denominators resolve by continuity: a depth-1 window is all
/// top; a single child is all left.
pub fn tcn_coefficients(d_i: u32, d: u32, p_i: u32, n: u32) -> Result<(f64, f64, f64)> {
    if d_i < 1 || d_i > d {
        return Err(Error::Config(format!("window depth d_i={d_i} outside 1..={d}")));
    }
    if p_i < 1 || p_i > n {
        return Err(Error::Config(format!("sibling position p_i={p_i} outside 1..={n}")));
    }
    let top = if d == 1 { 1.0 } else { f64::from(d_i - 1) / f64::from(d - 1) };
    let right =
        if n == 1 { 0.0 } else { (1.0 - top) * f64::from(p_i - 1) / f64::from(n - 1) };
    let left = (1.0 - top) * (1.0 - right);
    Ok((top, left, right))
}

/// Per-child blend coefficients of a tree as `[N, N]` constant matrices in
/// BFS order: entry `(u, c)` of the left (right) matrix is the left (right)
/// coefficient of child `c` in the window rooted at `u`.
pub fn child_coefficient_matrices(tree: &DataFlowTree) -> Result<(MatrixData, MatrixData)> {
    let n = tree.len();
    let mut left = MatrixData::zeros(n, n);
    let mut right = MatrixData::zeros(n, n);
    for u in 0..n {
        let children = tree.children_bfs(u);
        let siblings = children.len() as u32;
        for (pos, c) in children.into_iter().enumerate() {
            let (_, l, r) = tcn_coefficients(1, 2, pos as u32 + 1, siblings)?;
            left.data[u * n + c] = l;
            right.data[u * n + c] = r;
        }
    }
    Ok((left, right))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnLayerParams {
    pub w_top: MatrixData,
    pub w_left: MatrixData,
    pub w_right: MatrixData,
    pub bias: MatrixData,
}

/// Three convolution layers plus the readout MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnParams {
    pub layers: Vec<TcnLayerParams>,
    pub readout: MlpParams,
}

impl TcnParams {
    pub fn init<R: rand::Rng>(hidden: usize, layers: usize, rng: &mut R) -> TcnParams {
        TcnParams {
            layers: (0..layers)
                .map(|_| TcnLayerParams {
                    w_top: MatrixData::uniform_init(hidden, hidden, hidden, rng),
                    w_left: MatrixData::uniform_init(hidden, hidden, hidden, rng),
                    w_right: MatrixData::uniform_init(hidden, hidden, hidden, rng),
                    bias: MatrixData::zeros(1, hidden),
                })
                .collect(),
            readout: MlpParams::init(&[hidden, hidden, 1], rng),
        }
    }
}

/// Tape-side mirror of [`TcnParams`].
pub struct TcnTensors {
    pub layers: Vec<(Tensor, Tensor, Tensor, Tensor)>,
    pub readout: MlpTensors,
}

impl TcnTensors {
    pub fn from_params(params: &TcnParams, trainable: bool) -> TcnTensors {
        TcnTensors {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        l.w_top.to_tensor(trainable),
                        l.w_left.to_tensor(trainable),
                        l.w_right.to_tensor(trainable),
                        l.bias.to_tensor(trainable),
                    )
                })
                .collect(),
            readout: MlpTensors::from_params(&params.readout, trainable),
        }
    }

    pub fn to_params(&self) -> TcnParams {
        TcnParams {
            layers: self
                .layers
                .iter()
                .map(|(t, l, r, b)| TcnLayerParams {
                    w_top: MatrixData::from_tensor(t),
                    w_left: MatrixData::from_tensor(l),
                    w_right: MatrixData::from_tensor(r),
                    bias: MatrixData::from_tensor(b),
                })
                .collect(),
            readout: self.readout.to_params(),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .layers
            .iter()
            .flat_map(|(t, l, r, b)| [t.clone(), l.clone(), r.clone(), b.clone()])
            .collect();
        out.extend(self.readout.parameters());
        out
    }
}

/// Aggregate node vectors bottom-up and read out the root.
///
/// * `x` — `[N, hidden]` node vectors in BFS order,
/// * `left` / `right` — constant child coefficient matrices,
/// * `root` — BFS index of the root (0 for trees built here).
///
/// Per layer: `y = tanh(x W_top + (L x) W_left + (R x) W_right + b) + x`.
pub fn tcn_forward(
    x: &Tensor,
    left: &Tensor,
    right: &Tensor,
    tcn: &TcnTensors,
    root: usize,
) -> Result<Tensor> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Shape("tcn_forward on an empty tree".to_string()));
    }
    if left.shape() != [n, n] || right.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "tcn_forward: vectors {:?} vs coefficients {:?}/{:?}",
            x.shape(),
            left.shape(),
            right.shape()
        )));
    }
    let mut h = x.clone();
    for (w_top, w_left, w_right, bias) in &tcn.layers {
        let window = h
            .matmul(w_top)?
            .add(&left.matmul(&h)?.matmul(w_left)?)?
            .add(&right.matmul(&h)?.matmul(w_right)?)?
            .add_row(bias)?;
        h = window.tanh()?.add(&h)?;
    }
    tcn.readout.forward(&h.index_select(&[root])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::build_dataflow_tree;
    use crate::domain::{OperatorId, OperatorKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_top_gets_the_pure_top_matrix() {
        for (d, p, n) in [(2, 1, 1), (3, 2, 5), (4, 1, 2)] {
            assert_eq!(tcn_coefficients(d, d, p, n).unwrap(), (1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn leftmost_leaf_gets_the_pure_left_matrix() {
        let (t, l, r) = tcn_coefficients(1, 2, 1, 2).unwrap();
        assert_eq!((t, r), (0.0, 0.0));
        assert_eq!(l, 1.0);
    }

    #[test]
    fn worked_midwindow_value() {
        let (t, l, r) = tcn_coefficients(2, 3, 2, 3).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!((l - 0.375).abs() < 1e-12);
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_arguments_are_rejected() {
        assert!(tcn_coefficients(0, 2, 1, 1).is_err());
        assert!(tcn_coefficients(3, 2, 1, 1).is_err());
        assert!(tcn_coefficients(1, 2, 0, 1).is_err());
        assert!(tcn_coefficients(1, 2, 3, 2).is_err());
    }

    #[test]
    fn single_child_uses_the_degenerate_left_rule() {
        let (_, l, r) = tcn_coefficients(1, 2, 1, 1).unwrap();
        assert_eq!((l, r), (1.0, 0.0));
    }

    fn chain(len: usize) -> DataFlowTree {
        let path: Vec<OperatorId> = (0..len as u64).map(OperatorId).collect();
        build_dataflow_tree(&[path], &|_| Some(OperatorKind::Filter)).unwrap()
    }

    #[test]
    fn zero_weights_reduce_a_layer_to_bias_activation() {
        let hidden = 3;
        let tree = chain(1);
        let (l, r) = child_coefficient_matrices(&tree).unwrap();
        let mut params = TcnParams::init(hidden, 1, &mut ChaCha8Rng::seed_from_u64(0));
        for layer in &mut params.layers {
            layer.w_top.data.iter_mut().for_each(|v| *v = 0.0);
            layer.w_left.data.iter_mut().for_each(|v| *v = 0.0);
            layer.w_right.data.iter_mut().for_each(|v| *v = 0.0);
            layer.bias.data = vec![0.4, -0.3, 0.9];
        }
        // identity readout to observe the layer output directly
        params.readout = MlpParams {
            layers: vec![crate::models::mlp::LayerParams {
                w: MatrixData {
                    rows: hidden,
                    cols: 1,
                    data: vec![1.0, 0.0, 0.0],
                },
                b: MatrixData::zeros(1, 1),
            }],
        };
        let tcn = TcnTensors::from_params(&params, false);
        let x = Tensor::zeros(1, hidden);
        let y = tcn_forward(
            &x,
            &l.to_tensor(false),
            &r.to_tensor(false),
            &tcn,
            0,
        )
        .unwrap();
        // with zero input the residual adds nothing: root vector is tanh(b)
        assert!((y.item().unwrap() - 0.4f64.tanh()).abs() < 1e-12);
    }

    /// Straightforward recursive evaluation of the window formulas.
    #[test]
    fn five_node_tree_matches_recursive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hidden = 4;
        // root 0 with children 1, 2; 1 has children 3, 4 (ids = BFS order)
        let paths = vec![
            vec![OperatorId(0), OperatorId(1), OperatorId(3)],
            vec![OperatorId(0), OperatorId(1), OperatorId(4)],
            vec![OperatorId(0), OperatorId(2)],
        ];
        let tree = build_dataflow_tree(&paths, &|_| Some(OperatorKind::Filter)).unwrap();
        let (l, r) = child_coefficient_matrices(&tree).unwrap();
        let params = TcnParams::init(hidden, 3, &mut rng);
        let tcn = TcnTensors::from_params(&params, false);
        let n = tree.len();
        let x: Vec<f64> = (0..n * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let got = tcn_forward(
            &Tensor::from_vec(n, hidden, x.clone()).unwrap(),
            &l.to_tensor(false),
            &r.to_tensor(false),
            &tcn,
            0,
        )
        .unwrap()
        .item()
        .unwrap();

        // reference: per node, blend each window member's matrix directly
        let children: Vec<Vec<usize>> = (0..n).map(|u| tree.children_bfs(u)).collect();
        let matvec = |w: &MatrixData, v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; w.cols];
            for i in 0..w.rows {
                for j in 0..w.cols {
                    out[j] += v[i] * w.data[i * w.cols + j];
                }
            }
            out
        };
        let mut h: Vec<Vec<f64>> = (0..n).map(|u| x[u * hidden..(u + 1) * hidden].to_vec()).collect();
        for layer in &params.layers {
            let mut next = Vec::with_capacity(n);
            for u in 0..n {
                let (t_c, _, _) = tcn_coefficients(2, 2, 1, 1).unwrap();
                let mut acc = matvec(&layer.w_top, &h[u]).iter().map(|v| v * t_c).collect::<Vec<f64>>();
                let n_kids = children[u].len() as u32;
                for (pos, &c) in children[u].iter().enumerate() {
                    let (_, lc, rc) = tcn_coefficients(1, 2, pos as u32 + 1, n_kids).unwrap();
                    let wl = matvec(&layer.w_left, &h[c]);
                    let wr = matvec(&layer.w_right, &h[c]);
                    for k in 0..hidden {
                        acc[k] += lc * wl[k] + rc * wr[k];
                    }
                }
                let out: Vec<f64> = acc
                    .iter()
                    .zip(&layer.bias.data)
                    .zip(&h[u])
                    .map(|((a, b), x)| (a + b).tanh() + x)
                    .collect();
                next.push(out);
            }
            h = next;
        }
        let want = params.readout.eval(&h[0])[0];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}
