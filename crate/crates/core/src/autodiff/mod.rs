//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose parents already exist on the tape, so the
//! node order is a topological order and backward is a single reverse sweep.

mod gradcheck;

pub use gradcheck::{finite_diff_check, relative_error};

use crate::error::{arg, Error, Result};
use crate::tensor::{
    axis_extents, broadcast_index_map, broadcast_shape, gemm_nt, gemm_tn, softmax,
    topk_indices, Tensor, COSINE_EPS,
};

/// Slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    IndexSelect(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Cosine(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::IndexSelect(..) => "index_select",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Cosine(..) => "cosine",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant of the forward pass.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Tensor::new(&shape, data)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let s = LEAKY_SLOPE;
        let out = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        self.push(out, Op::LeakyRelu(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    /// `log σ(x)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return arg(format!("log_softmax axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (data[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    data[at(j)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return arg(format!("sum_axis axis {axis} out of range for {:?}", t.shape()));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Picks entries (rank 1) or rows (rank 2) along the first axis.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return arg("index_select on a scalar");
        }
        let n0 = t.shape()[0];
        let stride = t.numel() / n0.max(1);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n0 {
                return arg(format!("index {i} out of range for axis of length {n0}"));
            }
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::IndexSelect(a, indices.to_vec()), &[a]))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        t.expect_rank(2, "slice_cols")?;
        let (m, n) = (t.rows(), t.cols());
        if start + width > n {
            return arg(format!("slice {start}..{} exceeds {n} columns", start + width));
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let out = Tensor::new(&[m, width], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg("concat_rows of nothing");
        }
        let cols = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != cols[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&cols);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg("concat_cols of nothing");
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row-wise layer normalization of `x[m×n]` with gain and bias of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank(2, "layer_norm")?;
        let (m, n) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != n || b.numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            out,
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

    /// Pairwise cosine similarity of rows: `a[m×d]`, `b[n×d]` → `[m×n]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Error::Shape {
                op: "cosine",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(crate::tensor::cosine(ta.row(i), tb.row(j)));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::Cosine(a, b), &[a, b]))
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.value(a).numel(), self.value(b).numel());
        let ra = self.reshape(a, &[1, da])?;
        let rb = self.reshape(b, &[1, db])?;
        let c = self.cosine(ra, rb)?;
        self.reshape(c, &[])
    }

    /// The `k` largest entries of a vector in descending order. The indices
    /// are constants of the forward pass; gradients reach only the selected
    /// entries.
    pub fn topk(&mut self, a: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let t = self.value(a);
        t.expect_rank(1, "topk")?;
        let idx = topk_indices(t.data(), k)?;
        let v = self.index_select(a, &idx)?;
        Ok((v, idx))
    }

    /// Runs the reverse sweep from the scalar `loss`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).numel() != 1 {
            return arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.needs_grad {
                    return None;
                }
                let shape = node.value.shape();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, tb.data(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g[i * n + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate(grads, *a, unbroadcast(g, out.shape(), val(*a).shape(), 1.0));
                }
                if wants(*b) {
                    accumulate(grads, *b, unbroadcast(g, out.shape(), val(*b).shape(), sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let expand = |t: &Tensor| -> Vec<f64> {
                    if t.shape() == out.shape() {
                        t.data().to_vec()
                    } else {
                        broadcast_index_map(t.shape(), out.shape())
                            .into_iter()
                            .map(|i| t.data()[i])
                            .collect()
                    }
                };
                if wants(*a) {
                    let eb = expand(tb);
                    let ga: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, unbroadcast(&ga, out.shape(), ta.shape(), 1.0));
                }
                if wants(*b) {
                    let ea = expand(ta);
                    let gb: Vec<f64> = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, unbroadcast(&gb, out.shape(), tb.shape(), 1.0));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Tanh(a) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * s })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(-x)
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * sigmoid(-x))
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).numel()]),
            Op::SumAxis(a, axis) => {
                let src = val(*a);
                let (outer, len, inner) = axis_extents(src.shape(), *axis);
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[o * len * inner + j * inner + i] = g[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::IndexSelect(a, indices) => {
                let src = val(*a);
                let stride = src.numel() / src.shape()[0].max(1);
                let mut d = vec![0.0; src.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..stride {
                        d[i * stride + c] += g[k * stride + c];
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (m, n, w) = (src.rows(), src.cols(), out.cols());
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (out.rows(), out.cols());
                let gm = val(*gamma).data();
                if wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dh: Vec<f64> =
                            g[row.clone()].iter().zip(gm).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhx = dh
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for c in 0..n {
                            dx[r * n + c] =
                                rstd[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dhx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n, d) = (ta.rows(), tb.rows(), ta.cols());
                let na: Vec<f64> = (0..m).map(|i| norm(ta.row(i))).collect();
                let nb: Vec<f64> = (0..n).map(|j| norm(tb.row(j))).collect();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    let ai = ta.row(i);
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = tb.row(j);
                        let s: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        let den = na[i] * nb[j] + COSINE_EPS;
                        let ka = if na[i] > 0.0 { s * nb[j] / (den * den * na[i]) } else { 0.0 };
                        let kb = if nb[j] > 0.0 { s * na[i] / (den * den * nb[j]) } else { 0.0 };
                        for c in 0..d {
                            da[i * d + c] += gij * (bj[c] / den - ka * ai[c]);
                            db[j * d + c] += gij * (ai[c] / den - kb * bj[c]);
                        }
                    }
                }
                if wants(*a) {
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

/// Sums a gradient of `out_shape` back down to `src_shape`.
fn unbroadcast(g: &[f64], out_shape: &[usize], src_shape: &[usize], sign: f64) -> Vec<f64> {
    if out_shape == src_shape {
        return g.iter().map(|x| x * sign).collect();
    }
    let n: usize = src_shape.iter().product();
    let mut d = vec![0.0; n];
    for (gi, si) in g.iter().zip(broadcast_index_map(src_shape, out_shape)) {
        d[si] += gi * sign;
    }
    d
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(
        x: &Tensor,
        f: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = f(&mut tape, v).unwrap();
        tape.backward(loss).unwrap().get(v).unwrap().clone()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = grad_of(&x, |t, v| Ok(t.sum(v)));
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_twice_x() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = grad_of(&x, |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        });
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(vec![1.0]));
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Argument(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(Tensor::vector(vec![3.0]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, -1.0]));
        let t = tape.tanh(x);
        let l = tape.leaky_relu(x);
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert!((tape.value(l).data()[1] + 0.01).abs() < 1e-15);
        assert!(matches!(tape.log(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn topk_routes_gradient_to_selected_entries() {
        let x = Tensor::vector(vec![0.1, 0.9, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param(x);
        let (vals, idx) = tape.topk(v, 2).unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(tape.value(vals).data(), &[0.9, 0.5]);
        let s = tape.sum(vals);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert_eq!(log_sigmoid(1000.0), 0.0);
    }

    #[test]
    fn first_non_finite_reports_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![800.0]));
        let e = tape.exp(x);
        let _ = tape.scale(e, 2.0);
        assert_eq!(tape.first_non_finite(), Some((1, "exp")));
    }
}
