//! Wengert-list reverse-mode differentiation over matrices.
//!
//! Every operation records its inputs and output value on a [`Tape`]. Calling
//! [`Tape::backward`] on a `1 × 1` output walks the list in reverse and
//! returns gradients for every node that depends on a named parameter.
//! Constants never receive gradients.

use std::collections::BTreeMap;

use super::tensor::{self, matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Relu(Var),
    MeanRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Exp(Var),
    ClampMax(Var, f64),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    VStack(Vec<Var>),
    Gather(Var, Vec<usize>),
    HCat(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every named parameter leaf that was reached.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.as_matrix(), Op::Leaf, false)
    }

    /// A named differentiable leaf. Registering the same name twice returns
    /// the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.as_matrix(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = tensor::softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = tensor::log_softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Column-wise mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::gap(self.value(a))?.as_matrix();
        let ng = self.needs(a);
        Ok(self.push(value, Op::MeanRows(a), ng))
    }

    /// Scales every row to unit L2 norm; zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "row {r} has zero norm; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::NormalizeRows(a, norms), ng))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        self.matmul_nt(an, bn)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// `min(a, c)` elementwise; gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x.min(c));
        let ng = self.needs(a);
        self.push(value, Op::ClampMax(a, c), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::softplus);
        let ng = self.needs(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("vstack of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("vstack", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::VStack(parts.to_vec()), ng))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= t.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: t.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(index.len(), cols, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Gather(a, index.to_vec()), ng))
    }

    /// Concatenates columns: `[a | b]`.
    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("hcat", av, bv));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor::matrix(av.rows(), cols, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::HCat(a, b), ng))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: ov.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0).reshape(ov.shape())?);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*row) {
                    let mut col = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, x) in col.iter_mut().zip(g.row(r)) {
                            *c += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, g.cols(), col)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c))?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let yr = y.row(r);
                    let dotp: f64 = yr.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (out, (&yy, &gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(g.row(r))) {
                        *out = yy * (gg - dotp);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (out, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *out -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| if x > 0.0 { gg } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
                for r in 0..av.rows() {
                    for (out, gg) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *out = gg * inv;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::NormalizeRows(a, norms) => {
                let mut ga = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let dotp: f64 = yr.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (out, (&yy, &gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(g.row(r))) {
                        *out = (gg - yy * dotp) / n;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gg, yy| gg * yy)?)?,
            Op::ClampMax(a, c) => {
                let c = *c;
                let ga = g.zip_map(self.value(*a), |gg, x| if x < c { gg } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gg, x| gg * tensor::sigmoid(x))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(av.shape(), g.data()[0]))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape(), v))?;
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(rows, cols, slice)?)?;
                    }
                    offset += rows;
                }
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
                for (k, &i) in index.iter().enumerate() {
                    for (out, gg) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *out += gg;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::HCat(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ac);
                let mut gb = Vec::with_capacity(rows * bc);
                for r in 0..rows {
                    ga.extend_from_slice(&g.row(r)[..ac]);
                    gb.extend_from_slice(&g.row(r)[ac..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, ac, ga)?)?;
                self.accumulate(grads, *b, Tensor::matrix(rows, bc, gb)?)?;
            }
        }
        Ok(())
    }
}
