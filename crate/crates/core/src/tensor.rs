//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: double precision, explicit shapes, no
//! broadcasting beyond scalar multiplication and the explicit
//! [`Tensor::add_row`] bias op. Every operation records its parents and a
//! backward rule; [`Tensor::backward`] replays the recorded tape in reverse
//! topological order and accumulates gradients into the participating
//! tensors. A tensor graph is confined to one thread; independent passes on
//! independent graphs may run on separate threads.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

use crate::{Error, Result};

/// A dense row-major matrix of `f64` participating in a gradient tape.
///
/// Cloning a `Tensor` clones the handle, not the buffer.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

struct Node {
    rows: usize,
    cols: usize,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Backward rule: given the node's accumulated output gradient, push
/// gradient contributions into the parents.
type BackwardFn = Box<dyn Fn(&Node, &[Tensor])>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl Tensor {
    fn new_node(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        Tensor {
            node: Rc::new(Node {
                rows,
                cols,
                values: RefCell::new(values),
                grad: RefCell::new(vec![0.0; rows * cols]),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant tensor (does not require gradients).
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        check(values.len() == rows * cols, || {
            format!("{}x{} tensor needs {} values, got {}", rows, cols, rows * cols, values.len())
        })?;
        Ok(Tensor::new_node(rows, cols, values, false, Vec::new(), None))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn leaf(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        check(values.len() == rows * cols, || {
            format!("{}x{} leaf needs {} values, got {}", rows, cols, rows * cols, values.len())
        })?;
        Ok(Tensor::new_node(rows, cols, values, true, Vec::new(), None))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new_node(rows, cols, vec![0.0; rows * cols], false, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(1, 1, vec![v], false, Vec::new(), None)
    }

    /// Leaf initialized uniformly in `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`.
    pub fn uniform_init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor::new_node(rows, cols, values, true, Vec::new(), None)
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.node.rows, self.node.cols]
    }

    pub fn numel(&self) -> usize {
        self.node.rows * self.node.cols
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.node.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        check(self.numel() == 1, || format!("item() on {}x{} tensor", self.rows(), self.cols()))?;
        Ok(self.node.values.borrow()[0])
    }

    pub fn grad(&self) -> Vec<f64> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        for g in self.node.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    /// Overwrite a leaf's values in place (optimizer step, perturbation).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        check(values.len() == self.numel(), || {
            format!("set_values: expected {} values, got {}", self.numel(), values.len())
        })?;
        self.node.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    fn add_to_grad(&self, contrib: &[f64]) {
        let mut g = self.node.grad.borrow_mut();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse pass from a scalar output. Gradients accumulate into leaves
    /// (call [`Tensor::zero_grad`] between passes that should not sum);
    /// intermediate grads are reset per pass.
    pub fn backward(&self) -> Result<()> {
        check(self.numel() == 1, || {
            format!("backward from non-scalar {}x{} tensor", self.rows(), self.cols())
        })?;
        let tape = Tape::for_output(self);
        for t in &tape.order {
            if !t.node.parents.is_empty() {
                t.zero_grad();
            }
        }
        self.node.grad.borrow_mut()[0] += 1.0;
        tape.run();
        Ok(())
    }
}

/// The recorded forward pass in topological order.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    /// Collect every node reachable from `output` in topological order.
    pub fn for_output(output: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative post-order DFS; graphs are shallow but wide.
        let mut stack: Vec<(Tensor, usize)> = vec![(output.clone(), 0)];
        while let Some((t, child)) = stack.pop() {
            if child == 0 && !seen.insert(t.ptr()) {
                continue;
            }
            if child < t.node.parents.len() {
                let next = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if !seen.contains(&next.ptr()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }
        Tape { order }
    }

    fn run(&self) {
        for t in self.order.iter().rev() {
            if let Some(rule) = &t.node.backward {
                rule(&t.node, &t.node.parents);
            }
        }
    }
}

fn any_grad(parents: &[&Tensor]) -> bool {
    parents.iter().any(|p| p.node.requires_grad)
}

impl Tensor {
    /// Matrix product `self @ rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        check(self.cols() == rhs.rows(), || {
            format!(
                "matmul {}x{} @ {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )
        })?;
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let a = self.values();
        let b = rhs.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        let requires = any_grad(&[self, rhs]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let (a, b) = (&parents[0], &parents[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if a.node.requires_grad {
                    // dA += G @ B^T
                    let bv = b.values();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    drop(bv);
                    a.add_to_grad(&da);
                }
                if b.node.requires_grad {
                    // dB += A^T @ G
                    let av = a.values();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    drop(av);
                    b.add_to_grad(&db);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(m, n, out, requires, vec![self.clone(), rhs.clone()], backward))
    }

    fn elementwise_check(&self, rhs: &Tensor, op: &str) -> Result<()> {
        check(self.shape() == rhs.shape(), || {
            format!(
                "{} {}x{} vs {}x{}",
                op,
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise_check(rhs, "add")?;
        let out: Vec<f64> =
            self.values().iter().zip(rhs.values().iter()).map(|(x, y)| x + y).collect();
        let requires = any_grad(&[self, rhs]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                for p in parents {
                    if p.node.requires_grad {
                        p.add_to_grad(&g);
                    }
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            out,
            requires,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise_check(rhs, "sub")?;
        let out: Vec<f64> =
            self.values().iter().zip(rhs.values().iter()).map(|(x, y)| x - y).collect();
        let requires = any_grad(&[self, rhs]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                if parents[0].node.requires_grad {
                    parents[0].add_to_grad(&g);
                }
                if parents[1].node.requires_grad {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    parents[1].add_to_grad(&neg);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            out,
            requires,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    /// Element-wise product.
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise_check(rhs, "hadamard")?;
        let out: Vec<f64> =
            self.values().iter().zip(rhs.values().iter()).map(|(x, y)| x * y).collect();
        let requires = any_grad(&[self, rhs]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let (a, b) = (&parents[0], &parents[1]);
                if a.node.requires_grad {
                    let da: Vec<f64> = g.iter().zip(b.values().iter()).map(|(g, y)| g * y).collect();
                    a.add_to_grad(&da);
                }
                if b.node.requires_grad {
                    let db: Vec<f64> = g.iter().zip(a.values().iter()).map(|(g, x)| g * x).collect();
                    b.add_to_grad(&db);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            out,
            requires,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.values().iter().map(|x| x * c).collect();
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(self.rows(), self.cols(), out, requires, vec![self.clone()], backward))
    }

    /// Multiply by a learnable 1x1 scalar tensor.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        check(s.numel() == 1, || {
            format!("scale_by expects 1x1 scalar, got {}x{}", s.rows(), s.cols())
        })?;
        let sv = s.item()?;
        let out: Vec<f64> = self.values().iter().map(|x| x * sv).collect();
        let requires = any_grad(&[self, s]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let (a, s) = (&parents[0], &parents[1]);
                let sv = s.node.values.borrow()[0];
                if a.node.requires_grad {
                    let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                    a.add_to_grad(&da);
                }
                if s.node.requires_grad {
                    let ds: f64 = g.iter().zip(a.values().iter()).map(|(g, x)| g * x).sum();
                    s.add_to_grad(&[ds]);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(
            self.rows(),
            self.cols(),
            out,
            requires,
            vec![self.clone(), s.clone()],
            backward,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let (gm, gn) = (node.rows, node.cols);
                let mut da = vec![0.0; gm * gn];
                for i in 0..gm {
                    for j in 0..gn {
                        da[j * gm + i] = g[i * gn + j];
                    }
                }
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(n, m, out, requires, vec![self.clone()], backward))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.values().iter().map(|x| x.tanh()).collect();
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let y = node.values.borrow();
                let da: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(self.rows(), self.cols(), out, requires, vec![self.clone()], backward))
    }

    /// Leaky rectifier; `alpha = 0` gives plain relu.
    pub fn leaky_relu(&self, alpha: f64) -> Result<Tensor> {
        let out: Vec<f64> =
            self.values().iter().map(|&x| if x > 0.0 { x } else { alpha * x }).collect();
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let x = parents[0].values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * alpha })
                    .collect();
                drop(x);
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(self.rows(), self.cols(), out, requires, vec![self.clone()], backward))
    }

    /// Softmax across each row.
    pub fn row_softmax(&self) -> Result<Tensor> {
        check(self.numel() > 0, || "row_softmax on empty tensor".to_string())?;
        let (m, n) = (self.rows(), self.cols());
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        drop(v);
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let y = node.values.borrow();
                let (m, n) = (node.rows, node.cols);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 =
                        (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(m, n, out, requires, vec![self.clone()], backward))
    }

    /// Row softmax restricted to positions where `mask` is nonzero; masked-out
    /// positions produce weight 0. A row whose mask is entirely zero yields an
    /// all-zero row. `mask` is a constant and receives no gradient.
    pub fn masked_row_softmax(&self, mask: &Tensor) -> Result<Tensor> {
        self.elementwise_check(mask, "masked_row_softmax")?;
        let (m, n) = (self.rows(), self.cols());
        let v = self.values();
        let mk = mask.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mrow = &mk[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] != 0.0 {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // empty row
            }
            let mut denom = 0.0;
            for j in 0..n {
                if mrow[j] != 0.0 {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        drop(v);
        drop(mk);
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let y = node.values.borrow();
                let (m, n) = (node.rows, node.cols);
                // Masked-out entries have y = 0, so the softmax Jacobian
                // formula already routes zero gradient through them.
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(
            m,
            n,
            out,
            requires,
            vec![self.clone(), mask.clone()],
            backward,
        ))
    }

    /// Mean of all elements as a 1x1 tensor.
    pub fn mean(&self) -> Result<Tensor> {
        check(self.numel() > 0, || "mean of empty tensor".to_string())?;
        let n = self.numel() as f64;
        let m: f64 = self.values().iter().sum::<f64>() / n;
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow()[0];
                let da = vec![g / n; parents[0].numel()];
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(1, 1, vec![m], requires, vec![self.clone()], backward))
    }

    /// Sum of all elements as a 1x1 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.values().iter().sum();
        let requires = self.node.requires_grad;
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow()[0];
                let da = vec![g; parents[0].numel()];
                parents[0].add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(1, 1, vec![s], requires, vec![self.clone()], backward))
    }

    /// Mean squared error against `target`, as a 1x1 tensor.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        self.elementwise_check(target, "mse")?;
        check(self.numel() > 0, || "mse of empty tensors".to_string())?;
        let n = self.numel() as f64;
        let loss: f64 = self
            .values()
            .iter()
            .zip(target.values().iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let requires = any_grad(&[self, target]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow()[0];
                let (p, t) = (&parents[0], &parents[1]);
                let diffs: Vec<f64> = p
                    .values()
                    .iter()
                    .zip(t.values().iter())
                    .map(|(p, t)| g * 2.0 * (p - t) / n)
                    .collect();
                if p.node.requires_grad {
                    p.add_to_grad(&diffs);
                }
                if t.node.requires_grad {
                    let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
                    t.add_to_grad(&neg);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(1, 1, vec![loss], requires, vec![self.clone(), target.clone()], backward))
    }

    /// Concatenate tensors along `axis` (0 = stack rows, 1 = stack columns).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        check(!parts.is_empty(), || "concat of zero tensors".to_string())?;
        check(axis < 2, || format!("concat axis {} out of range", axis))?;
        let (m0, n0) = (parts[0].rows(), parts[0].cols());
        let (mut rows, mut cols) = (m0, n0);
        for p in &parts[1..] {
            if axis == 0 {
                check(p.cols() == n0, || "concat rows: column mismatch".to_string())?;
                rows += p.rows();
            } else {
                check(p.rows() == m0, || "concat cols: row mismatch".to_string())?;
                cols += p.cols();
            }
        }
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for p in parts {
                let v = p.values();
                out[at..at + v.len()].copy_from_slice(&v);
                at += v.len();
            }
        } else {
            let mut col_at = 0;
            for p in parts {
                let v = p.values();
                let pn = p.cols();
                for i in 0..rows {
                    out[i * cols + col_at..i * cols + col_at + pn]
                        .copy_from_slice(&v[i * pn..(i + 1) * pn]);
                }
                col_at += pn;
            }
        }
        let requires = parts.iter().any(|p| p.node.requires_grad);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let cols = node.cols;
                if axis == 0 {
                    let mut at = 0;
                    for p in parents {
                        let len = p.numel();
                        if p.node.requires_grad {
                            p.add_to_grad(&g[at..at + len]);
                        }
                        at += len;
                    }
                } else {
                    let rows = node.rows;
                    let mut col_at = 0;
                    for p in parents {
                        let pn = p.cols();
                        if p.node.requires_grad {
                            let mut da = vec![0.0; rows * pn];
                            for i in 0..rows {
                                da[i * pn..(i + 1) * pn].copy_from_slice(
                                    &g[i * cols + col_at..i * cols + col_at + pn],
                                );
                            }
                            p.add_to_grad(&da);
                        }
                        col_at += pn;
                    }
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(rows, cols, out, requires, parts.to_vec(), backward))
    }

    /// Gather rows by index. The backward pass scatter-adds gradients back to
    /// the source rows, which keeps tree/graph re-indexing differentiable.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        for &i in indices {
            check(i < m, || format!("index_select: row {} out of {}", i, m))?;
        }
        let v = self.values();
        let mut out = vec![0.0; indices.len() * n];
        for (k, &i) in indices.iter().enumerate() {
            out[k * n..(k + 1) * n].copy_from_slice(&v[i * n..(i + 1) * n]);
        }
        drop(v);
        let requires = self.node.requires_grad;
        let idx: Vec<usize> = indices.to_vec();
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(move |node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let n = node.cols;
                let src = &parents[0];
                let mut da = vec![0.0; src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[k * n + j];
                    }
                }
                src.add_to_grad(&da);
            }) as BackwardFn
        });
        Ok(Tensor::new_node(indices.len(), n, out, requires, vec![self.clone()], backward))
    }

    /// Add a 1xC row vector to every row of an MxC tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        check(bias.rows() == 1 && bias.cols() == self.cols(), || {
            format!(
                "add_row: bias 1x{} needed, got {}x{}",
                self.cols(),
                bias.rows(),
                bias.cols()
            )
        })?;
        let (m, n) = (self.rows(), self.cols());
        let v = self.values();
        let b = bias.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = v[i * n + j] + b[j];
            }
        }
        drop(v);
        drop(b);
        let requires = any_grad(&[self, bias]);
        let backward: Option<BackwardFn> = requires.then(|| {
            Box::new(|node: &Node, parents: &[Tensor]| {
                let g = node.grad.borrow();
                let (m, n) = (node.rows, node.cols);
                if parents[0].node.requires_grad {
                    parents[0].add_to_grad(&g);
                }
                if parents[1].node.requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    parents[1].add_to_grad(&db);
                }
            }) as BackwardFn
        });
        Ok(Tensor::new_node(m, n, out, requires, vec![self.clone(), bias.clone()], backward))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("values", &self.to_vec())
            .finish()
    }
}

/// Finite-difference gradient checking used by the test suites.
pub mod gradcheck {
    use super::Tensor;
    use crate::Result;

    /// Relative error between analytic and numeric derivatives, with small
    /// magnitudes treated as matching.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-8 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        }
    }

    /// Check a scalar-valued graph builder against central finite
    /// differences at every element of every leaf. Returns the maximum
    /// relative error observed.
    ///
    /// `build` must construct a fresh graph from the given leaves each call.
    pub fn max_gradient_error<F>(build: F, leaves: &[Tensor], eps: f64) -> Result<f64>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        for leaf in leaves {
            leaf.zero_grad();
        }
        let out = build(leaves)?;
        out.backward()?;
        let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();

        let mut worst: f64 = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let base = leaf.to_vec();
            for ei in 0..base.len() {
                let mut bumped = base.clone();
                bumped[ei] = base[ei] + eps;
                leaf.set_values(&bumped)?;
                let up = build(leaves)?.item()?;
                bumped[ei] = base[ei] - eps;
                leaf.set_values(&bumped)?;
                let down = build(leaves)?.item()?;
                leaf.set_values(&base)?;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(relative_error(grads[li][ei], numeric));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_gradient_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        // Keep values away from 0 so finite differences never straddle the
        // leaky_relu kink.
        let v = (0..rows * cols)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.5..1.5);
                if x.abs() < 0.05 {
                    x + 0.1
                } else {
                    x
                }
            })
            .collect();
        Tensor::leaf(rows, cols, v).unwrap()
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let a = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(a.mse(&b).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let a = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let y = a.row_softmax().unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn tanh_derivative_at_zero_matches_finite_difference() {
        let x = Tensor::leaf(1, 1, vec![0.0]).unwrap();
        let err = max_gradient_error(|l| l[0].tanh()?.sum(), &[x.clone()], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
        assert!((x.grad()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let a = Tensor::leaf(2, 2, vec![1.0; 4]).unwrap();
        assert!(a.backward().is_err());
    }

    #[test]
    fn every_primitive_passes_gradcheck_on_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let m = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize);
            let n = rng.gen_range(1..4usize);
            let a = rnd(m, k, &mut rng);
            let b = rnd(k, n, &mut rng);
            let c = rnd(m, k, &mut rng);
            let s = rnd(1, 1, &mut rng);
            let bias = rnd(1, k, &mut rng);
            let mask_vals: Vec<f64> = (0..m * k)
                .map(|i| if i % k == 0 || rng.gen_bool(0.6) { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(m, k, mask_vals).unwrap();
            let idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..m)).collect();

            let cases: Vec<(&str, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>)> = vec![
                ("matmul", Box::new(|l: &[Tensor]| l[0].matmul(&l[1])?.sum())),
                ("add", Box::new(|l: &[Tensor]| l[0].add(&l[2])?.sum())),
                ("sub", Box::new(|l: &[Tensor]| l[0].sub(&l[2])?.sum())),
                ("hadamard", Box::new(|l: &[Tensor]| l[0].hadamard(&l[2])?.sum())),
                ("scale", Box::new(|l: &[Tensor]| l[0].scale(-1.7)?.sum())),
                ("scale_by", Box::new(|l: &[Tensor]| l[0].scale_by(&l[3])?.sum())),
                ("transpose", Box::new(|l: &[Tensor]| l[0].transpose()?.tanh()?.sum())),
                ("tanh", Box::new(|l: &[Tensor]| l[0].tanh()?.sum())),
                ("leaky_relu", Box::new(|l: &[Tensor]| l[0].leaky_relu(0.2)?.hadamard(&l[2])?.sum())),
                ("row_softmax", Box::new(|l: &[Tensor]| l[0].row_softmax()?.hadamard(&l[2])?.sum())),
                (
                    "masked_row_softmax",
                    Box::new({
                        let mask = mask.clone();
                        move |l: &[Tensor]| l[0].masked_row_softmax(&mask)?.hadamard(&l[2])?.sum()
                    }),
                ),
                ("mean", Box::new(|l: &[Tensor]| l[0].mean())),
                ("mse", Box::new(|l: &[Tensor]| l[0].mse(&l[2]))),
                (
                    "concat0",
                    Box::new(|l: &[Tensor]| Tensor::concat(&[l[0].clone(), l[2].clone()], 0)?.tanh()?.sum()),
                ),
                (
                    "concat1",
                    Box::new(|l: &[Tensor]| Tensor::concat(&[l[0].clone(), l[2].clone()], 1)?.tanh()?.sum()),
                ),
                (
                    "index_select",
                    Box::new({
                        let idx = idx.clone();
                        move |l: &[Tensor]| l[0].index_select(&idx)?.tanh()?.sum()
                    }),
                ),
                ("add_row", Box::new(|l: &[Tensor]| l[0].add_row(&l[4])?.tanh()?.sum())),
            ];
            for (name, build) in cases {
                let leaves = [a.clone(), b.clone(), c.clone(), s.clone(), bias.clone()];
                let err = max_gradient_error(build, &leaves, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_backwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rnd(3, 3, &mut rng);
        let t1 = rnd(3, 3, &mut rng);
        let t2 = rnd(3, 3, &mut rng);

        let joint = x.mse(&t1).unwrap().add(&x.mse(&t2).unwrap()).unwrap();
        joint.backward().unwrap();
        let combined = x.grad();

        x.zero_grad();
        x.mse(&t1).unwrap().backward().unwrap();
        x.mse(&t2).unwrap().backward().unwrap();
        let separate = x.grad();

        for (a, b) in combined.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let t = rnd(m, n, &mut rng);
            let y = t.row_softmax().unwrap();
            let v = y.to_vec();
            for i in 0..m {
                let s: f64 = v[i * n..(i + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor::leaf(1, 1, vec![2.0]).unwrap();
        let y = x.scale(3.0).unwrap().sum().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad()[0], 6.0);
    }
}
