//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is a
//! valid topological order, so `backward` is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Concat0(Vec<Var>),
    Reshape(Var),
    AddRow(Var, Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Bce {
        p: Var,
        target: Arc<Vec<f64>>,
        clamp: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn shape_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        msg: msg.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.numel() == 1 {
            Ok(ta.shape().to_vec())
        } else if ta.numel() == 1 {
            Ok(tb.shape().to_vec())
        } else {
            Err(dim_err(op, ta, tb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        (0..n).map(|i| f(pick(da, i), pick(db, i))).collect()
    }

    /// Elementwise sum; either side may be a single-element tensor (scalar broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x + y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x - y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x * y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// `x[r, :] + bias` for every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("add_row", x)?;
        if self.value(bias).numel() != c {
            return Err(dim_err("add_row", self.value(x), self.value(bias)));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x · w + b`, the affine map applied to each row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- pointwise ------------------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::log_sigmoid);
        self.push(out, Op::LogSigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0))
        {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Which side of every non-differentiable point this pass took: the sign
    /// of each relu input and whether each BCE probability was clamped. Two
    /// passes with equal patterns evaluate the same smooth branch.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::Bce { p, clamp, .. } => out.extend(
                    self.value(*p)
                        .data()
                        .iter()
                        .map(|&v| v > *clamp && v < 1.0 - clamp),
                ),
                _ => {}
            }
        }
        out
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of an `N x D` matrix, giving `1 x D`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self
            .matrix_dims("global_avg_pool", x)
            .map_err(|_| TensorError::Empty {
                op: "global_avg_pool",
            })?;
        let data = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in data.chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::from_parts(vec![1, d], out), Op::MeanRows(x), &[x]))
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Empty { op: "mean_of" })?;
        let mut acc = first;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    // ---- attention building blocks -------------------------------------

    /// Row-wise softmax with max subtraction. `keep`, when given, marks the
    /// columns that participate; the others get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", x)?;
        if let Some(k) = keep {
            if k.len() != c {
                return Err(shape_err(
                    "softmax_rows",
                    format!("mask has {} entries for {c} columns", k.len()),
                ));
            }
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for (row, dst) in data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let live = |j: usize| keep.is_none_or(|k| k[j]);
            let max = (0..c)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if live(j) {
                    dst[j] = (row[j] - max).exp();
                    z += dst[j];
                }
            }
            let inv = 1.0 / z;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last axis of a matrix with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(dim_err("layer_norm", self.value(x), self.value(gamma)));
        }
        let data = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mu) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- spatial --------------------------------------------------------

    /// Cross-correlation of a `C_in x H x W` input with a `C_out x C_in x k x k` bank.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(shape_err("conv2d", format!("input must be C x H x W, got {s:?}"))),
        };
        let (c_out, k) = match self.shape(w) {
            &[co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            _ => return Err(dim_err("conv2d", self.value(x), self.value(w))),
        };
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(dim_err("conv2d", self.value(w), self.value(b)));
            }
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(shape_err(
                    "conv2d",
                    format!("extent {n} with pad {pad}, kernel {k}, stride {stride} is not exact"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: extent(h)?,
            w_out: extent(wd)?,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; c_out * p];
        if let Some(b) = b {
            for (o, &bv) in out.chunks_exact_mut(p).zip(self.value(b).data()) {
                o.iter_mut().for_each(|v| *v = bv);
            }
        }
        kernels::gemm(
            false,
            false,
            c_out,
            rows,
            p,
            self.value(w).data(),
            &cols,
            1.0,
            &mut out,
        );
        let shape = vec![c_out, geom.h_out, geom.w_out];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// `out.flat[j] = x.flat[index[j]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", "index length does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, index }, &[x]))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!("part {i} has shape {s:?}, expected trailing extents {tail:?}"),
                ));
            }
            lead += s[0];
        }
        let mut out = Vec::with_capacity(lead * tail.iter().product::<usize>());
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat0(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- fused losses ---------------------------------------------------

    /// Cosine similarity `a·b / (|a||b| + eps)` of two equally shaped tensors.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("cosine", self.value(a), self.value(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
        let na = da.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = db.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = dot / (na * nb + eps);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, eps }, &[a, b]))
    }

    /// Mean pixel-wise binary cross-entropy with probabilities clamped to
    /// `[clamp, 1 - clamp]` before the logarithms.
    pub fn bce(&mut self, p: Var, target: &Tensor, clamp: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(dim_err("bce", self.value(p), target));
        }
        let n = target.numel() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let pc = p.clamp(clamp, 1.0 - clamp);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: Arc::new(target.data().to_vec()),
                clamp,
            },
            &[p],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, populating gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Rank(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.node_backward(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` seed with respect to `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulate into the gradient buffer of `v` when it needs one.
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:expr) => {{
                let v: Var = $v;
                if needs(v) {
                    let n = self.nodes[v.0].value.numel();
                    let $d: &mut Vec<f64> = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body;
                }
            }};
        }
        let broadcast_acc = |d: &mut Vec<f64>, f: &dyn Fn(usize) -> f64| {
            if d.len() == 1 && g.len() > 1 {
                d[0] += (0..g.len()).map(f).sum::<f64>();
            } else {
                for (j, dv) in d.iter_mut().enumerate() {
                    *dv += f(j);
                }
            }
        };
        let pick = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                acc!(a, |d| kernels::gemm(false, true, m, n, k, g, val(b), 1.0, d));
                acc!(b, |d| kernels::gemm(true, false, k, m, n, val(a), g, 1.0, d));
            }
            &Op::Add(a, b) => {
                acc!(a, |d| broadcast_acc(d, &|j| g[j]));
                acc!(b, |d| broadcast_acc(d, &|j| g[j]));
            }
            &Op::Sub(a, b) => {
                acc!(a, |d| broadcast_acc(d, &|j| g[j]));
                acc!(b, |d| broadcast_acc(d, &|j| -g[j]));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |d| broadcast_acc(d, &|j| g[j] * pick(vb, j)));
                acc!(b, |d| broadcast_acc(d, &|j| g[j] * pick(va, j)));
            }
            &Op::Scale(x, s) => acc!(x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            &Op::AddConst(x) | &Op::Reshape(x) => {
                acc!(x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            &Op::Sigmoid(x) => acc!(x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }),
            &Op::LogSigmoid(x) => acc!(x, |d| {
                for ((d, g), xv) in d.iter_mut().zip(g).zip(val(x)) {
                    *d += g * (1.0 - kernels::sigmoid(*xv));
                }
            }),
            &Op::Log(x) => acc!(x, |d| {
                for ((d, g), xv) in d.iter_mut().zip(g).zip(val(x)) {
                    *d += g / xv;
                }
            }),
            &Op::Exp(x) => acc!(x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }),
            &Op::Relu(x) => acc!(x, |d| {
                for ((d, g), xv) in d.iter_mut().zip(g).zip(val(x)) {
                    if *xv > 0.0 {
                        *d += g;
                    }
                }
            }),
            &Op::Softmax(x) => acc!(x, |d| {
                let c = node.value.shape()[1];
                for ((dr, gr), yr) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(y.chunks_exact(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.shape()[1];
                let gam = val(*gamma);
                acc!(*gamma, |d| {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc!(*beta, |d| {
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                });
                acc!(*x, |d| {
                    let cf = c as f64;
                    for (r, ((dr, gr), hr)) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dr[j] += rstd[r] / cf * (cf * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                acc!(*w, |d| kernels::gemm(false, true, c_out, p, rows, g, cols, 1.0, d));
                if let Some(b) = *b {
                    acc!(b, |d| {
                        for (dv, gr) in d.iter_mut().zip(g.chunks_exact(p)) {
                            *dv += gr.iter().sum::<f64>();
                        }
                    });
                }
                acc!(*x, |d| {
                    let mut dcols = vec![0.0; rows * p];
                    kernels::gemm(true, false, rows, c_out, p, val(*w), g, 0.0, &mut dcols);
                    kernels::col2im(&dcols, geom, d);
                });
            }
            Op::Gather { x, index } => acc!(*x, |d| {
                for (&src, gv) in index.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc!(p, |d| d
                        .iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, g)| *d += g));
                    off += n;
                }
            }
            &Op::AddRow(x, bias) => {
                let c = node.value.shape()[1];
                acc!(x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(bias, |d| {
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                });
            }
            &Op::MeanRows(x) => acc!(x, |d| {
                let cols = g.len();
                let inv = 1.0 / (d.len() / cols) as f64;
                for dr in d.chunks_exact_mut(cols) {
                    for j in 0..cols {
                        dr[j] += g[j] * inv;
                    }
                }
            }),
            &Op::Sum(x) => acc!(x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => acc!(x, |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }),
            &Op::Cosine { a, b, eps } => {
                let (va, vb) = (val(a), val(b));
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let den = na * nb + eps;
                // d/da [dot / (|a||b| + eps)] = b/den - dot * |b| * a / (|a| den^2)
                let grad_of = |own: &[f64], other: &[f64], n_own: f64, n_other: f64, j: usize| {
                    let mut v = other[j] / den;
                    if n_own > 0.0 {
                        v -= dot * n_other * own[j] / (n_own * den * den);
                    }
                    g[0] * v
                };
                acc!(a, |d| for j in 0..d.len() {
                    d[j] += grad_of(va, vb, na, nb, j);
                });
                acc!(b, |d| for j in 0..d.len() {
                    d[j] += grad_of(vb, va, nb, na, j);
                });
            }
            Op::Bce { p, target, clamp } => acc!(*p, |d| {
                let n = target.len() as f64;
                for ((dv, &pv), &yv) in d.iter_mut().zip(val(*p)).zip(target.iter()) {
                    if pv > *clamp && pv < 1.0 - clamp {
                        *dv += -g[0] / n * (yv / pv - (1.0 - yv) / (1.0 - pv));
                    }
                }
            }),
        }
    }
}
