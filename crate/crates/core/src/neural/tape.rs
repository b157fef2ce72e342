//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation in creation order, so a reverse sweep
//! over the node list is a valid topological order for the backward pass.
//! Parameters enter as named leaves bound to a [`ParamStore`]; after
//! [`Tape::backward`] their gradients are added into the store.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{masked_softmax, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    OuterAdd(Var, Var),
    SoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
    SqErr {
        input: Var,
        target: Tensor,
        weights: Option<Vec<f64>>,
    },
    BceLogits {
        input: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a {:?} tensor", t.shape());
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not written anywhere.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named parameter leaf. Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .value(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the 1×c row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for c in 0..cols {
                let x = v.get(r, c) + bias.get(0, c);
                v.set(r, c, x);
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::Mul(a, b))
    }

    /// `k·a + c` elementwise.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let v = self.value(a).map(|x| k * x + c);
        self.push(v, Op::Affine(a, k))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(v, Op::Elu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                out.row_slice_mut(r)[off..off + src.cols()].copy_from_slice(src.row_slice(r));
                off += src.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let v = Tensor::from_vec(rows, cols, data).expect("shape");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `a` at `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        self.push(v, Op::Gather(a, idx.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx)
    }

    /// Entries of `a` at row-major positions `idx`, as a 1×len row.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a).data();
        let data = idx.iter().map(|&i| x[i]).collect();
        let v = Tensor::from_vec(1, idx.len(), data).expect("shape");
        self.push(v, Op::Pick(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::filled(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` (n×1) and `b` (m×1).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), 1);
        assert_eq!(y.cols(), 1);
        let mut out = Tensor::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                out.set(i, j, x.get(i, 0) + y.get(j, 0));
            }
        }
        self.push(out, Op::OuterAdd(a, b))
    }

    /// Row-wise softmax. `mask` is row-major over the same shape; `false`
    /// entries get exactly zero probability.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols, "softmax mask shape");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let allowed = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            let p = masked_softmax(x.row_slice(r), allowed);
            out.row_slice_mut(r).copy_from_slice(&p);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `−Σ_k y_k log p_k` with `p = softmax(logits)` over the allowed slots.
    /// `logits` must be a single row; targets on disallowed slots are a bug.
    pub fn softmax_xent(&mut self, logits: Var, allowed: Option<&[bool]>, targets: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), 1, "softmax_xent expects a row vector");
        assert_eq!(x.cols(), targets.len());
        let probs = masked_softmax(x.row_slice(0), allowed);
        let mut loss = 0.0;
        for (k, &y) in targets.iter().enumerate() {
            if y != 0.0 {
                assert!(
                    allowed.map_or(true, |m| m[k]),
                    "target on masked slot {k}"
                );
                loss -= y * probs[k].ln();
            }
        }
        self.push(
            Tensor::filled(1, 1, loss),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// `Σ w·(a − target)²`, unit weights when `weights` is `None`.
    pub fn sq_err(&mut self, a: Var, target: Tensor, weights: Option<Vec<f64>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape());
        if let Some(w) = &weights {
            assert_eq!(w.len(), x.len());
        }
        let loss: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (p, q))| weights.as_ref().map_or(1.0, |w| w[i]) * (p - q).powi(2))
            .sum();
        self.push(
            Tensor::filled(1, 1, loss),
            Op::SqErr {
                input: a,
                target,
                weights,
            },
        )
    }

    /// Summed binary cross-entropy of `sigmoid(a)` against `target`.
    pub fn bce_logits(&mut self, a: Var, target: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), target.len());
        let loss: f64 = x
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::filled(1, 1, loss),
            Op::BceLogits {
                input: a,
                target: target.to_vec(),
            },
        )
    }

    fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = dout.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dout);
                    Self::acc(&mut grads, *a, da);
                    Self::acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dout.matmul(self.value(*b));
                    let db = dout.t_matmul(self.value(*a));
                    Self::acc(&mut grads, *a, da);
                    Self::acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    Self::acc(&mut grads, *a, dout.clone());
                    Self::acc(&mut grads, *b, dout.clone());
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, dout.cols());
                    for r in 0..dout.rows() {
                        for (o, g) in db.data_mut().iter_mut().zip(dout.row_slice(r)) {
                            *o += g;
                        }
                    }
                    Self::acc(&mut grads, *a, dout.clone());
                    Self::acc(&mut grads, *b, db);
                }
                Op::Sub(a, b) => {
                    Self::acc(&mut grads, *a, dout.clone());
                    Self::acc(&mut grads, *b, dout.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let (x, z) = (self.value(*a), self.value(*b));
                    let da = zip_map(&dout, z, |g, q| g * q);
                    let db = zip_map(&dout, x, |g, p| g * p);
                    Self::acc(&mut grads, *a, da);
                    Self::acc(&mut grads, *b, db);
                }
                Op::Affine(a, k) => {
                    let k = *k;
                    Self::acc(&mut grads, *a, dout.map(|g| g * k));
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&dout, y, |g, s| g * s * (1.0 - s));
                    Self::acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(&dout, y, |g, t| g * (1.0 - t * t));
                    Self::acc(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let da = zip_map(&dout, self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else {
                            g * slope
                        }
                    });
                    Self::acc(&mut grads, *a, da);
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut da = zip_map(&dout, y, |g, e| g * (e + 1.0));
                    for (d, (&xi, &g)) in da.data_mut().iter_mut().zip(x.data().iter().zip(dout.data())) {
                        if xi > 0.0 {
                            *d = g;
                        }
                    }
                    Self::acc(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut g = Tensor::zeros(dout.rows(), cols);
                        for r in 0..dout.rows() {
                            g.row_slice_mut(r)
                                .copy_from_slice(&dout.row_slice(r)[off..off + cols]);
                        }
                        off += cols;
                        Self::acc(&mut grads, p, g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let idx: Vec<usize> = (off..off + rows).collect();
                        off += rows;
                        Self::acc(&mut grads, p, dout.select_rows(&idx));
                    }
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut g = Tensor::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, d) in g.row_slice_mut(i).iter_mut().zip(dout.row_slice(r)) {
                            *o += d;
                        }
                    }
                    Self::acc(&mut grads, *a, g);
                }
                Op::Pick(a, idx) => {
                    let src = self.value(*a);
                    let mut g = Tensor::zeros(src.rows(), src.cols());
                    for (&i, d) in idx.iter().zip(dout.data()) {
                        g.data_mut()[i] += d;
                    }
                    Self::acc(&mut grads, *a, g);
                }
                Op::Transpose(a) => {
                    Self::acc(&mut grads, *a, dout.transpose());
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let mut g = Tensor::zeros(rows, dout.cols());
                    let k = 1.0 / rows.max(1) as f64;
                    for r in 0..rows {
                        for (o, d) in g.row_slice_mut(r).iter_mut().zip(dout.data()) {
                            *o = d * k;
                        }
                    }
                    Self::acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    Self::acc(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), dout.data()[0]));
                }
                Op::OuterAdd(a, b) => {
                    let mut da = Tensor::zeros(dout.rows(), 1);
                    let mut db = Tensor::zeros(dout.cols(), 1);
                    for i in 0..dout.rows() {
                        for j in 0..dout.cols() {
                            let g = dout.get(i, j);
                            da.data_mut()[i] += g;
                            db.data_mut()[j] += g;
                        }
                    }
                    Self::acc(&mut grads, *a, da);
                    Self::acc(&mut grads, *b, db);
                }
                Op::SoftmaxRows(a) => {
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let p = y.row_slice(r);
                        let g = dout.row_slice(r);
                        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                        for (o, (pi, gi)) in da.row_slice_mut(r).iter_mut().zip(p.iter().zip(g)) {
                            *o = pi * (gi - dot);
                        }
                    }
                    Self::acc(&mut grads, *a, da);
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    targets,
                } => {
                    let total: f64 = targets.iter().sum();
                    let g = dout.data()[0];
                    let data = probs
                        .iter()
                        .zip(targets)
                        .map(|(p, t)| g * (total * p - t))
                        .collect();
                    let da = Tensor::from_vec(1, probs.len(), data).expect("shape");
                    Self::acc(&mut grads, *logits, da);
                }
                Op::SqErr {
                    input,
                    target,
                    weights,
                } => {
                    let g = dout.data()[0];
                    let x = self.value(*input);
                    let mut da = zip_map(x, target, |p, q| 2.0 * g * (p - q));
                    if let Some(w) = weights {
                        for (d, wi) in da.data_mut().iter_mut().zip(w) {
                            *d *= wi;
                        }
                    }
                    Self::acc(&mut grads, *input, da);
                }
                Op::BceLogits { input, target } => {
                    let g = dout.data()[0];
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&z, &t)| g * (sigmoid(z) - t))
                        .collect();
                    let da = Tensor::from_vec(x.rows(), x.cols(), data).expect("shape");
                    Self::acc(&mut grads, *input, da);
                }
            }
            grads[idx] = Some(dout);
        }
        self.grads = grads;
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    /// Frozen parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.add_grad(name, g);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}
