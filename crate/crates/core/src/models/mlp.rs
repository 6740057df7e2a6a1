//! Plain-data matrices and small MLPs, plus their gradient-tape mirrors.
//!
//! Model parameters are stored as [`MatrixData`] (serializable, `Send`) and
//! materialized into [`crate::tensor::Tensor`] leaves or constants per
//! training session or inference call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::Result;

/// A dense row-major `f64` matrix as plain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn zeros(rows: usize, cols: usize) -> MatrixData {
        MatrixData { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Uniform initialization in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn uniform_init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> MatrixData {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        MatrixData {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn to_tensor(&self, trainable: bool) -> Tensor {
        if trainable {
            Tensor::leaf(self.rows, self.cols, self.data.clone()).expect("matrix shape")
        } else {
            Tensor::from_vec(self.rows, self.cols, self.data.clone()).expect("matrix shape")
        }
    }

    pub fn from_tensor(t: &Tensor) -> MatrixData {
        MatrixData { rows: t.rows(), cols: t.cols(), data: t.to_vec() }
    }
}

/// One dense layer: `y = x @ w + b` with `w` of shape `[in, out]` and `b`
/// of shape `[1, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: MatrixData,
    pub b: MatrixData,
}

/// A small MLP. Hidden layers use tanh and a residual connection whenever
/// input and output widths match; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// `dims = [in, h1, ..., out]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> MlpParams {
        let layers = dims
            .windows(2)
            .map(|w| LayerParams {
                w: MatrixData::uniform_init(w[0], w[1], w[0], rng),
                b: MatrixData::zeros(1, w[1]),
            })
            .collect();
        MlpParams { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.rows)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.cols)
    }

    /// Plain (tape-free) forward pass for one input row. Mirrors
    /// [`MlpTensors::forward`] exactly.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.w.rows, layer.w.cols);
            debug_assert_eq!(h.len(), n_in);
            let mut y = layer.b.data.clone();
            for (i, &xi) in h.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &layer.w.data[i * n_out..(i + 1) * n_out];
                for (yj, wj) in y.iter_mut().zip(row) {
                    *yj += xi * wj;
                }
            }
            if li != last {
                for v in y.iter_mut() {
                    *v = v.tanh();
                }
                if n_in == n_out {
                    for (v, xi) in y.iter_mut().zip(&h) {
                        *v += xi;
                    }
                }
            }
            h = y;
        }
        h
    }
}

/// Tape-side mirror of [`MlpParams`].
pub struct MlpTensors {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpTensors {
    pub fn from_params(params: &MlpParams, trainable: bool) -> MlpTensors {
        MlpTensors {
            layers: params
                .layers
                .iter()
                .map(|l| (l.w.to_tensor(trainable), l.b.to_tensor(trainable)))
                .collect(),
        }
    }

    pub fn to_params(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| LayerParams {
                    w: MatrixData::from_tensor(w),
                    b: MatrixData::from_tensor(b),
                })
                .collect(),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    /// Batch forward: `x` is `[batch, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut y = h.matmul(w)?.add_row(b)?;
            if li != last {
                y = y.tanh()?;
                if w.rows() == w.cols() {
                    y = y.add(&h)?;
                }
            }
            h = y;
        }
        Ok(h)
    }
}
