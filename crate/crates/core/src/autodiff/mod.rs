//! Reverse-mode automatic differentiation on a flat tape of f64 tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes once in reverse insertion order and accumulates vector-Jacobian
//! products into the leaves. All math is f64 and all accumulation orders are
//! fixed, so identical inputs give bitwise identical gradients.

pub mod check;

use crate::error::{Error, Result};
use statrs::function::gamma::{digamma, ln_gamma};

/// Dense row-major tensor. Rank 1 (`[n]`) and rank 2 (`[n, m]`) cover all
/// uses in this crate; higher ranks are never constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    values.len()
                ),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis; 0 for an empty shape.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors count as one row).
    pub fn n_rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.last_dim() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    MeanCols(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Swish(usize),
    LnGamma(usize),
    // The shift is applied when the node's value is computed; only the
    // scale matters to the backward pass.
    ScalarAffine { x: usize, mul: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize },
    LogSoftmax(usize),
    LogSumExp(usize),
}

struct Node {
    op: Op,
    tensor: Tensor,
    requires_grad: bool,
}

/// Gradients of one scalar root with respect to every trainable leaf.
/// Leaves the root does not depend on get zero gradients; constant leaves
/// are absent.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(exp(a) + exp(b)) without overflow.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a >= b {
        a + softplus(b - a)
    } else {
        b + softplus(a - b)
    }
}

fn ensure_all_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerics { op: op.to_string() })
    }
}

/// Records a computation as a sequence of tensor nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    fn push(&mut self, op: Op, tensor: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            tensor,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, op: Op, tensor: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_all_finite(name, &tensor.values)?;
        Ok(self.push(op, tensor, requires_grad))
    }

    fn register(&mut self, tensor: Tensor, requires_grad: bool) -> Result<Var> {
        if tensor.numel() == 0 {
            return Err(Error::Contract("empty tensors cannot enter the tape".into()));
        }
        if !tensor.is_finite() {
            return Err(Error::Numerics { op: "leaf".into() });
        }
        Ok(self.push(Op::Leaf, tensor, requires_grad))
    }

    /// Registers a trainable leaf. Its gradient appears in [`Tape::backward`] output.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        self.register(tensor.clone(), true)
    }

    /// Registers a constant. It receives no gradient and blocks none from flowing past it.
    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        self.register(tensor.clone(), false)
    }

    pub fn constant_owned(&mut self, tensor: Tensor) -> Result<Var> {
        self.register(tensor, false)
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; n * m];
        let (av, bv) = (&ta.values, &tb.values);
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for l in 0..k {
                let ail = av[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let brow = &bv[l * m..(l + 1) * m];
                for j in 0..m {
                    orow[j] += ail * brow[j];
                }
            }
        }
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push_checked("matmul", Op::Matmul(a.0, b.0), Tensor::new(vec![n, m], out)?, rg)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape == tb.shape {
            return Ok(false);
        }
        // Row broadcast: rhs is one row matching the lhs column count.
        if ta.rank() == 2 && tb.numel() == ta.shape[1] && tb.n_rows() == 1 {
            return Ok(true);
        }
        Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
        })
    }

    /// Elementwise sum. The right operand may be a single row, which is added
    /// to every row of the left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_kind("add", a, b)?;
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let mut out = ta.values.clone();
        if row {
            let m = tb.numel();
            for (i, v) in out.iter_mut().enumerate() {
                *v += tb.values[i % m];
            }
        } else {
            for (v, w) in out.iter_mut().zip(&tb.values) {
                *v += w;
            }
        }
        let rg = self.needs(a.0) || self.needs(b.0);
        let shape = ta.shape.clone();
        let op = if row { Op::AddRow(a.0, b.0) } else { Op::Add(a.0, b.0) };
        self.push_checked("add", op, Tensor::new(shape, out)?, rg)
    }

    /// Elementwise product with the same row-broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_kind("mul", a, b)?;
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let mut out = ta.values.clone();
        if row {
            let m = tb.numel();
            for (i, v) in out.iter_mut().enumerate() {
                *v *= tb.values[i % m];
            }
        } else {
            for (v, w) in out.iter_mut().zip(&tb.values) {
                *v *= w;
            }
        }
        let rg = self.needs(a.0) || self.needs(b.0);
        let shape = ta.shape.clone();
        let op = if row { Op::MulRow(a.0, b.0) } else { Op::Mul(a.0, b.0) };
        self.push_checked("mul", op, Tensor::new(shape, out)?, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scalar_affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let n = self.nodes[parts[0].0].tensor.n_rows();
        let mut total = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].tensor;
            if t.rank() != 2 || t.shape[0] != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("expected rank-2 with {} rows, got {:?}", n, t.shape),
                });
            }
            total += t.shape[1];
        }
        let mut out = vec![0.0; n * total];
        let mut offset = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].tensor;
            let m = t.shape[1];
            for i in 0..n {
                out[i * total + offset..i * total + offset + m]
                    .copy_from_slice(&t.values[i * m..(i + 1) * m]);
            }
            offset += m;
        }
        let rg = parts.iter().any(|p| self.needs(p.0));
        let op = Op::ConcatCols(parts.iter().map(|p| p.0).collect());
        self.push_checked("concat_cols", op, Tensor::new(vec![n, total], out)?, rg)
    }

    /// Takes columns `start..start + len` along the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        let m = t.last_dim();
        if start + len > m || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("slice {}..{} of width {}", start, start + len, m),
            });
        }
        let n = t.numel() / m;
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&t.values[i * m + start..i * m + start + len]);
        }
        let shape = if t.rank() == 2 { vec![n, len] } else { vec![len] };
        let rg = self.needs(x.0);
        self.push_checked(
            "slice_cols",
            Op::SliceCols { x: x.0, start },
            Tensor::new(shape, out)?,
            rg,
        )
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("expected rank-2, got {:?}", t.shape),
            });
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows index {} out of range for {} rows",
                bad, n
            )));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut out = vec![0.0; idx.len() * m];
        for (pos, &src) in idx.iter().enumerate() {
            out[pos * m..(pos + 1) * m].copy_from_slice(&t.values[src * m..(src + 1) * m]);
        }
        let rg = self.needs(x.0);
        self.push_checked(
            "gather_rows",
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), m], out)?,
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].tensor.values.iter().sum();
        let rg = self.needs(x.0);
        self.push_checked("sum_all", Op::SumAll(x.0), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        let s: f64 = t.values.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs(x.0);
        self.push_checked("mean_all", Op::MeanAll(x.0), Tensor::scalar(s), rg)
    }

    fn reduce_cols(&mut self, name: &'static str, x: Var, mean: bool) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: name,
                detail: format!("expected rank-2, got {:?}", t.shape),
            });
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..m {
                s += t.values[i * m + j];
            }
            out[i] = if mean { s / m as f64 } else { s };
        }
        let rg = self.needs(x.0);
        let op = if mean { Op::MeanCols(x.0) } else { Op::SumCols(x.0) };
        self.push_checked(name, op, Tensor::new(vec![n, 1], out)?, rg)
    }

    /// Row sums of a rank-2 tensor, kept as a column `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.reduce_cols("sum_cols", x, false)
    }

    /// Row means of a rank-2 tensor, kept as a column `[n, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        self.reduce_cols("mean_cols", x, true)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        op: fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        let rg = self.needs(x.0);
        self.push_checked(name, op(x.0), Tensor::new(shape, out)?, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log, f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus, softplus)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, Op::Swish, |v| v * sigmoid(v))
    }

    /// Log-gamma, defined here for strictly positive inputs only.
    pub fn ln_gamma(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        if t.values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln_gamma requires strictly positive input".into()));
        }
        self.unary("ln_gamma", x, Op::LnGamma, ln_gamma)
    }

    pub fn scalar_affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(Error::Contract("scalar_affine coefficients must be finite".into()));
        }
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values.iter().map(|&v| mul * v + add).collect();
        let shape = t.shape.clone();
        let rg = self.needs(x.0);
        self.push_checked(
            "scalar_affine",
            Op::ScalarAffine { x: x.0, mul },
            Tensor::new(shape, out)?,
            rg,
        )
    }

    /// Per-row normalization to zero mean and unit variance (epsilon 1e-5
    /// inside the square root), then an affine map by `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("expected rank-2, got {:?}", t.shape),
            });
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        let (tg, tb) = (&self.nodes[gain.0].tensor, &self.nodes[bias.0].tensor);
        if tg.numel() != m || tb.numel() != m {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("gain/bias must have {} elements", m),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &t.values[i * m..(i + 1) * m];
            let (mu, sd) = row_moments(row);
            for j in 0..m {
                out[i * m + j] = tg.values[j] * (row[j] - mu) / sd + tb.values[j];
            }
        }
        let rg = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push_checked(
            "layer_norm",
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            Tensor::new(vec![n, m], out)?,
            rg,
        )
    }

    /// Log of the softmax along the last axis, computed through a
    /// max-shifted log-sum-exp so large logits cannot overflow.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        let m = t.last_dim();
        let n = t.numel() / m;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &t.values[i * m..(i + 1) * m];
            let lse = row_logsumexp(row);
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        let shape = t.shape.clone();
        let rg = self.needs(x.0);
        self.push_checked("log_softmax", Op::LogSoftmax(x.0), Tensor::new(shape, out)?, rg)
    }

    /// Softmax along the last axis, `exp(log_softmax(x))`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax(x)?;
        self.exp(ls)
    }

    /// Row-wise log(sum(exp(x))) of a rank-2 tensor, kept as a column `[n, 1]`.
    pub fn logsumexp_cols(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].tensor;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "logsumexp_cols",
                detail: format!("expected rank-2, got {:?}", t.shape),
            });
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = row_logsumexp(&t.values[i * m..(i + 1) * m]);
        }
        let rg = self.needs(x.0);
        self.push_checked(
            "logsumexp_cols",
            Op::LogSumExp(x.0),
            Tensor::new(vec![n, 1], out)?,
            rg,
        )
    }

    /// Stable logistic function as a composite: exp(-softplus(-x)).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let neg = self.scalar_affine(x, -1.0, 0.0)?;
        let sp = self.softplus(neg)?;
        let nsp = self.scalar_affine(sp, -1.0, 0.0)?;
        self.exp(nsp)
    }

    /// Maps an unconstrained tensor to strictly positive values:
    /// softplus(x) + floor.
    pub fn positive(&mut self, x: Var, floor: f64) -> Result<Var> {
        let sp = self.softplus(x)?;
        self.scalar_affine(sp, 1.0, floor)
    }

    /// Computes d(root)/d(leaf) for every trainable leaf at or before `root`.
    /// The root must hold exactly one element.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.tensor.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.tensor.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for t in (0..=root.0).rev() {
            if grads[t].is_none() || !self.nodes[t].requires_grad {
                continue;
            }
            let g = grads[t].clone().expect("grad present");
            self.propagate(t, &g, &mut grads);
        }

        let mut by_node: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let values = if i <= root.0 {
                    grads[i].take().unwrap_or_else(|| vec![0.0; node.tensor.numel()])
                } else {
                    vec![0.0; node.tensor.numel()]
                };
                by_node.push(Some(Tensor {
                    shape: node.tensor.shape.clone(),
                    values,
                }));
            } else {
                by_node.push(None);
            }
        }
        Ok(Gradients { by_node })
    }

    fn acc<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        idx: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[idx].requires_grad {
            return None;
        }
        let numel = nodes[idx].tensor.numel();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn propagate(&self, t: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[t].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (n, k) = (nodes[*a].tensor.shape[0], nodes[*a].tensor.shape[1]);
                let m = nodes[*b].tensor.shape[1];
                if let Some(da) = Self::acc(grads, nodes, *a) {
                    let bv = &nodes[*b].tensor.values;
                    for i in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv[l * m + j];
                            }
                            da[i * k + l] += s;
                        }
                    }
                }
                if let Some(db) = Self::acc(grads, nodes, *b) {
                    let av = &nodes[*a].tensor.values;
                    for i in 0..n {
                        for l in 0..k {
                            let ail = av[i * k + l];
                            if ail == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[l * m + j] += ail * g[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = Self::acc(grads, nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = Self::acc(grads, nodes, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = Self::acc(grads, nodes, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                let m = nodes[*b].tensor.numel();
                if let Some(db) = Self::acc(grads, nodes, *b) {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % m] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = Self::acc(grads, nodes, *a) {
                    let bv = &nodes[*b].tensor.values;
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i];
                    }
                }
                if let Some(db) = Self::acc(grads, nodes, *b) {
                    let av = &nodes[*a].tensor.values;
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[i] * av[i];
                    }
                }
            }
            Op::MulRow(a, b) => {
                let m = nodes[*b].tensor.numel();
                if let Some(da) = Self::acc(grads, nodes, *a) {
                    let bv = &nodes[*b].tensor.values;
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % m];
                    }
                }
                if let Some(db) = Self::acc(grads, nodes, *b) {
                    let av = &nodes[*a].tensor.values;
                    for (i, gv) in g.iter().enumerate() {
                        db[i % m] += gv * av[i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|p| nodes[*p].tensor.shape[1]).sum();
                let n = nodes[t].tensor.shape[0];
                let mut offset = 0usize;
                for p in parts {
                    let m = nodes[*p].tensor.shape[1];
                    if let Some(dp) = Self::acc(grads, nodes, *p) {
                        for i in 0..n {
                            for j in 0..m {
                                dp[i * m + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += m;
                }
            }
            Op::SliceCols { x, start } => {
                let src = &nodes[*x].tensor;
                let m = src.last_dim();
                let len = nodes[t].tensor.last_dim();
                let n = src.numel() / m;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for i in 0..n {
                        for j in 0..len {
                            dx[i * m + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let m = nodes[*x].tensor.shape[1];
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (pos, &src) in idx.iter().enumerate() {
                        for j in 0..m {
                            dx[src * m + j] += g[pos * m + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let numel = nodes[*x].tensor.numel() as f64;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0] / numel;
                    }
                }
            }
            Op::SumCols(x) => {
                let m = nodes[*x].tensor.shape[1];
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i / m];
                    }
                }
            }
            Op::MeanCols(x) => {
                let m = nodes[*x].tensor.shape[1];
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i / m] / m as f64;
                    }
                }
            }
            Op::Exp(x) => {
                let out = &nodes[t].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * out[i];
                    }
                }
            }
            Op::Log(x) => {
                let xv = &nodes[*x].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] / xv[i];
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = &nodes[*x].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::Swish(x) => {
                let xv = &nodes[*x].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let s = sigmoid(xv[i]);
                        *d += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                }
            }
            Op::LnGamma(x) => {
                let xv = &nodes[*x].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * digamma(xv[i]);
                    }
                }
            }
            Op::ScalarAffine { x, mul, .. } => {
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * mul;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let src = &nodes[*x].tensor;
                let (n, m) = (src.shape[0], src.shape[1]);
                let gv = &nodes[*gain].tensor.values;
                for i in 0..n {
                    let row = &src.values[i * m..(i + 1) * m];
                    let (mu, sd) = row_moments(row);
                    let grow = &g[i * m..(i + 1) * m];
                    if let Some(dg) = Self::acc(grads, nodes, *gain) {
                        for j in 0..m {
                            dg[j] += grow[j] * (row[j] - mu) / sd;
                        }
                    }
                    if let Some(db) = Self::acc(grads, nodes, *bias) {
                        for j in 0..m {
                            db[j] += grow[j];
                        }
                    }
                    if nodes[*x].requires_grad {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..m {
                            let xh = (row[j] - mu) / sd;
                            let dxh = grow[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= m as f64;
                        mean_dxh_xh /= m as f64;
                        if let Some(dx) = Self::acc(grads, nodes, *x) {
                            for j in 0..m {
                                let xh = (row[j] - mu) / sd;
                                let dxh = grow[j] * gv[j];
                                dx[i * m + j] += (dxh - mean_dxh - xh * mean_dxh_xh) / sd;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let out = &nodes[t].tensor;
                let m = out.last_dim();
                let n = out.numel() / m;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for i in 0..n {
                        let mut gsum = 0.0;
                        for j in 0..m {
                            gsum += g[i * m + j];
                        }
                        for j in 0..m {
                            dx[i * m + j] += g[i * m + j] - out.values[i * m + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let src = &nodes[*x].tensor;
                let (n, m) = (src.shape[0], src.shape[1]);
                let out = &nodes[t].tensor.values;
                if let Some(dx) = Self::acc(grads, nodes, *x) {
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] += g[i] * (src.values[i * m + j] - out[i]).exp();
                        }
                    }
                }
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, (var + 1e-5).sqrt())
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: Vec<f64>) -> Tensor {
        Tensor::row(v)
    }

    #[test]
    fn tensor_shape_must_match_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stable_scalars() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0).is_finite(), true);
        assert!((logaddexp(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn swish_and_softplus_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![0.0, 1.0, -1.0, 1000.0, -1000.0])).unwrap();
        let sw = tape.swish(x).unwrap();
        let sp = tape.softplus(x).unwrap();
        assert_eq!(tape.value(sw).values()[0], 0.0);
        assert!((tape.value(sw).values()[1] - 1.0 * sigmoid(1.0)).abs() < 1e-15);
        assert_eq!(tape.value(sw).values()[3], 1000.0);
        assert!((tape.value(sp).values()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(tape.value(sp).is_finite());
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(1, 4, vec![5.0; 4]).unwrap()).unwrap();
        let g = tape.constant(&t1(vec![1.0; 4])).unwrap();
        let b = tape.constant(&t1(vec![0.0; 4])).unwrap();
        let out = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(out).values(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![2.0])).unwrap();
        let c = tape.constant(&t1(vec![3.0])).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![2.0])).unwrap();
        let y = tape.leaf(&t1(vec![4.0])).unwrap();
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap().values(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(&t1(vec![f64::NAN])),
            Err(Error::Numerics { .. })
        ));
    }

    #[test]
    fn log_of_negative_reports_op_name() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(vec![-1.0])).unwrap();
        match tape.log(x) {
            Err(Error::Numerics { op }) => assert_eq!(op, "log"),
            other => panic!("expected numerics error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn overflow_safe_on_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(1, 3, vec![1000.0, -1000.0, 0.0]).unwrap()).unwrap();
        let ls = tape.log_softmax(x).unwrap();
        let lse = tape.logsumexp_cols(x).unwrap();
        let sp = tape.softplus(x).unwrap();
        assert!(tape.value(ls).is_finite());
        assert!((tape.value(lse).values()[0] - 1000.0).abs() < 1e-9);
        assert!(tape.value(sp).is_finite());
    }

    #[test]
    fn matmul_shapes_and_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert_eq!(tape.value(c).values(), &[58., 64., 139., 154.]);
        let bad = tape.matmul(a, a);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::matrix(2, 1, vec![5., 6.]).unwrap()).unwrap();
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).values(), &[1., 2., 5., 3., 4., 6.]);
        let back = tape.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back).values(), &[5., 6.]);
    }

    #[test]
    fn gather_rows_repeats_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let g = tape.gather_rows(a, &[0, 0, 1]).unwrap();
        assert_eq!(tape.value(g).values(), &[1., 2., 1., 2., 3., 4.]);
        let s = tape.sum_all(g).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().values(), &[2., 2., 1., 1.]);
    }

    #[test]
    fn row_broadcast_add_and_mul() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = tape.leaf(&t1(vec![10., 20., 30.])).unwrap();
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).values(), &[11., 22., 33., 14., 25., 36.]);
        let prod = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(prod).values(), &[10., 40., 90., 40., 100., 180.]);
        let s = tape.sum_all(sum).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().values(), &[2., 2., 2.]);
    }

    #[test]
    fn backward_is_deterministic_across_rebuilds() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(&Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 1.1).collect()).unwrap())
                .unwrap();
            let w = tape
                .leaf(&Tensor::matrix(4, 2, (0..8).map(|i| ((i * 7 % 5) as f64) * 0.21 - 0.4).collect()).unwrap())
                .unwrap();
            let h = tape.matmul(x, w).unwrap();
            let a = tape.swish(h).unwrap();
            let ls = tape.log_softmax(a).unwrap();
            let s = tape.mean_all(ls).unwrap();
            let grads = tape.backward(s).unwrap();
            (
                grads.get(x).unwrap().values().to_vec(),
                grads.get(w).unwrap().values().to_vec(),
            )
        };
        let (gx1, gw1) = build();
        let (gx2, gw2) = build();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    proptest! {
        #[test]
        fn prop_double_backward_matches(seed_x in -20i32..20, seed_y in -20i32..20) {
            let xv = f64::from(seed_x) * 0.13 + 0.05;
            let yv = f64::from(seed_y) * 0.29 - 0.02;
            let mut tape = Tape::new();
            let x = tape.leaf(&t1(vec![xv])).unwrap();
            let y = tape.leaf(&t1(vec![yv])).unwrap();
            let s = tape.add(x, y).unwrap();
            let p = tape.mul(s, x).unwrap();
            let out = tape.sum_all(p).unwrap();
            let g1 = tape.backward(out).unwrap();
            let g2 = tape.backward(out).unwrap();
            prop_assert_eq!(g1.get(x).unwrap().values(), g2.get(x).unwrap().values());
            prop_assert_eq!(g1.get(y).unwrap().values(), g2.get(y).unwrap().values());
            // d/dx[(x + y) x] = 2x + y
            let expect = 2.0 * xv + yv;
            prop_assert!((g1.get(x).unwrap().values()[0] - expect).abs() < 1e-12);
        }
    }
}
