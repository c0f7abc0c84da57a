//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! assigned in creation order, so inputs always precede outputs and the
//! backward sweep is a single reverse pass over the node list.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Neg(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var),
    Scale(Var, Var),
    AddRowBias(Var, Var),
    Pick(Var, usize),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient data; `None` means identically zero.
    pub fn get_data(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn unary_map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn vector_len(&self, op: &'static str, a: Var) -> Result<usize> {
        let shape = self.shape(a);
        if shape.len() != 1 {
            return Err(Error::dim(op, shape, &[]));
        }
        Ok(shape[0])
    }

    /// Differentiable leaf (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(a).data(), r, c))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", self.shape(a), shape))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let value = unary_map(self.value(a), |x| c * x);
        let rg = self.rg(a);
        self.push(value, Op::ScalarMul(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), |x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        let value = unary_map(self.value(a), f64::ln);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.vector_len("softmax", a)?;
        let value = Tensor::vector(softmax_raw(self.value(a).data()));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.vector_len("log_softmax", a)?;
        let value = Tensor::vector(log_softmax_raw(self.value(a).data()));
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// `x / sum(x)` for a vector of positive entries.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        self.vector_len("normalize", a)?;
        let x = self.value(a).data();
        if let Some(bad) = x.iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain {
                op: "normalize",
                detail: format!("entry {bad} is not positive"),
            });
        }
        let total: f64 = x.iter().sum();
        let value = Tensor::vector(x.iter().map(|&v| v / total).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Normalize(a), rg))
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let value = unary_map(self.value(a), |x| c * x);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    /// Adds bias `[n]` to every row of a `[rows, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_row_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// Entry `index` of a vector, shape `[1]`.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.vector_len("pick", a)?;
        if index >= len {
            return Err(Error::Contract(format!(
                "pick index {index} out of range for length {len}"
            )));
        }
        let value = Tensor::scalar(self.value(a).data()[index]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Pick(a, index), rg))
    }

    /// Copy of `a` through which no gradient flows.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Does not modify the tape, so repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Constants and nodes not upstream of the loss read as zero.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let y = node.value.data();
        match node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    acc(a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(b) {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    acc(b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(a);
                acc(a, transpose_raw(g, s[1], s[0]));
            }
            Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, g.iter().zip(vb).map(|(gi, bi)| gi * bi).collect());
                acc(b, g.iter().zip(va).map(|(gi, ai)| gi * ai).collect());
            }
            Op::ScalarMul(a, c) => acc(a, g.iter().map(|x| c * x).collect()),
            Op::Neg(a) => acc(a, g.iter().map(|x| -x).collect()),
            Op::Tanh(a) => acc(a, g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect()),
            Op::Relu(a) => {
                let x = self.value(a).data();
                acc(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )
            }
            Op::Sigmoid(a) => acc(a, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect()),
            Op::Exp(a) => acc(a, g.iter().zip(y).map(|(gi, e)| gi * e).collect()),
            Op::Log(a) => {
                let x = self.value(a).data();
                acc(a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect())
            }
            Op::Sum(a) => acc(a, vec![g[0]; self.value(a).numel()]),
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                acc(a, g.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)).collect())
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(
                    a,
                    g.iter()
                        .zip(y)
                        .map(|(gi, lp)| gi - lp.exp() * total)
                        .collect(),
                )
            }
            Op::Normalize(a) => {
                let total: f64 = self.value(a).data().iter().sum();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                acc(a, g.iter().map(|gi| (gi - dot) / total).collect())
            }
            Op::Scale(a, s) => {
                let c = self.value(s).item();
                let x = self.value(a).data();
                acc(a, g.iter().map(|gi| gi * c).collect());
                acc(s, vec![g.iter().zip(x).map(|(gi, xi)| gi * xi).sum()]);
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(bias).numel();
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
                acc(x, g.to_vec());
                acc(bias, db);
            }
            Op::Pick(a, index) => {
                let mut d = vec![0.0; self.value(a).numel()];
                d[index] = g[0];
                acc(a, d);
            }
        }
    }
}
