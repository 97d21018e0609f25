//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the graph; creation order is a valid
//! topological order, so the backward sweep just walks the node list in
//! reverse. Graphs are rebuilt for every forward pass.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator stabilizer for norms and variances.
pub const EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove that the gradient
/// checker detects broken derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the SiLU derivative by 1.5.
    SiluBackward,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVec(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmaxRows {
        x: Var,
        excluded: Option<Vec<bool>>,
    },
    NormalizeRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Reshape(Var),
}

/// A value/gradient pair plus the record of how it was produced.
#[derive(Clone, Debug)]
pub struct DiffNode {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
    fault: Fault,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let n = value.numel();
        self.nodes.push(DiffNode {
            value,
            grad: vec![0.0; n],
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let n = value.numel();
        self.nodes.push(DiffNode {
            value,
            grad: vec![0.0; n],
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "matmul")?;
        let (q2, r) = dims2(self.value(b), "matmul")?;
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!("[{p}x{q}] . [{q2}x{r}]: inner extents differ"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let aik = av[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * r..(k + 1) * r];
                for (o, bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, r], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "transpose")?;
        let av = self.value(a).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = av[i * q + j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![q, p], out),
            Op::Transpose(a),
            &[a],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        self.push(Tensor::from_parts(shape, data), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`q` vector to every row of a `p x q` matrix.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "add_row_vec")?;
        if self.value(v).numel() != q {
            return Err(Error::shape(
                "add_row_vec",
                format!("row width {q}, vector {:?}", self.shape(v)),
            ));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut out = av.to_vec();
        for i in 0..p {
            add_into(&mut out[i * q..(i + 1) * q], vv);
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, q], out),
            Op::AddRowVec(a, v),
            &[a, v],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(a).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xv[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Row-wise log-softmax of a matrix. Entries flagged in `excluded`
    /// (row-major, same size as the input) are left out of the normalizer;
    /// their outputs are reported as 0 and carry no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, excluded: Option<Vec<bool>>) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "log_softmax_rows")?;
        if let Some(mask) = &excluded {
            if mask.len() != p * q {
                return Err(Error::shape("log_softmax_rows", "mask size"));
            }
            for i in 0..p {
                if mask[i * q..(i + 1) * q].iter().all(|&m| m) {
                    return Err(Error::shape(
                        "log_softmax_rows",
                        format!("row {i} has every entry excluded"),
                    ));
                }
            }
        }
        let keep = |i: usize| excluded.as_ref().is_none_or(|m| !m[i]);
        let xv = self.value(a).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row = i * q..(i + 1) * q;
            let m = row
                .clone()
                .filter(|&k| keep(k))
                .map(|k| xv[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row
                .clone()
                .filter(|&k| keep(k))
                .map(|k| (xv[k] - m).exp())
                .sum();
            let lse = m + z.ln();
            for k in row.filter(|&k| keep(k)) {
                out[k] = xv[k] - lse;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, q], out),
            Op::LogSoftmaxRows { x: a, excluded },
            &[a],
        ))
    }

    /// Scales each row to unit length, dividing by `max(‖row‖, EPS)`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "normalize_rows")?;
        let xv = self.value(a).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row = &xv[i * q..(i + 1) * q];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            for (o, x) in out[i * q..(i + 1) * q].iter_mut().zip(row) {
                *o = x / n;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, q], out),
            Op::NormalizeRows(a),
            &[a],
        ))
    }

    /// Per-row layer normalization with elementwise gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(x), "layer_norm_rows")?;
        if self.value(gain).numel() != q || self.value(bias).numel() != q {
            return Err(Error::shape("layer_norm_rows", "gain/bias width"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row = &xv[i * q..(i + 1) * q];
            let (mu, r) = row_moments(row);
            for j in 0..q {
                out[i * q + j] = (row[j] - mu) * r * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, q], out),
            Op::LayerNormRows { x, gain, bias },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Averages the rows of a `p x q` matrix into a `1 x q` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "mean_rows")?;
        let xv = self.value(a).data();
        let mut out = vec![0.0; q];
        for i in 0..p {
            add_into(&mut out, &xv[i * q..(i + 1) * q]);
        }
        out.iter_mut().for_each(|o| *o /= p as f64);
        Ok(self.push(
            Tensor::from_parts(vec![1, q], out),
            Op::MeanRows(a),
            &[a],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let q = dims2(self.value(parts[0]), "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != q {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {c} differs from {q}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, q], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let p = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let (r, c) = dims2(self.value(v), "concat_cols")?;
            if r != p {
                return Err(Error::shape(
                    "concat_cols",
                    format!("height {r} differs from {p}"),
                ));
            }
            widths.push(c);
        }
        let q: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            for (&v, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, q], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "slice_rows")?;
        if len == 0 || start + len > p {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {p}", start + len),
            ));
        }
        let out = self.value(a).data()[start * q..(start + len) * q].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, q], out),
            Op::SliceRows(a, start),
            &[a],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "slice_cols")?;
        if len == 0 || start + len > q {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {q}", start + len),
            ));
        }
        let xv = self.value(a).data();
        let mut out = Vec::with_capacity(p * len);
        for i in 0..p {
            out.extend_from_slice(&xv[i * q + start..i * q + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![p, len], out),
            Op::SliceCols(a, start),
            &[a],
        ))
    }

    /// Builds a matrix whose row `k` is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "gather_rows")?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let xv = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * q);
        for &r in index {
            if r >= p {
                return Err(Error::shape("gather_rows", format!("row {r} of {p}")));
            }
            out.extend_from_slice(&xv[r * q..(r + 1) * q]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), q], out),
            Op::GatherRows(a, index.to_vec()),
            &[a],
        ))
    }

    /// Picks individual `(row, col)` entries into a vector.
    pub fn gather_elems(&mut self, a: Var, index: &[(usize, usize)]) -> Result<Var> {
        let (p, q) = dims2(self.value(a), "gather_elems")?;
        if index.is_empty() {
            return Err(Error::shape("gather_elems", "empty index"));
        }
        let xv = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for &(r, c) in index {
            if r >= p || c >= q {
                return Err(Error::shape(
                    "gather_elems",
                    format!("({r},{c}) outside [{p}x{q}]"),
                ));
            }
            out.push(xv[r * q + c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![index.len()], out),
            Op::GatherElems(a, index.to_vec()),
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(a),
            &[a],
        ))
    }

    /// Cosine similarity of two equally sized vectors, with each norm
    /// floored at [`EPS`] so zero vectors give 0 instead of failing.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let n = self.value(u).numel();
        if n != self.value(v).numel() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(u), self.shape(v)),
            ));
        }
        let u2 = self.reshape(u, &[1, n])?;
        let v2 = self.reshape(v, &[1, n])?;
        let un = self.normalize_rows(u2)?;
        let vn = self.normalize_rows(v2)?;
        let prod = self.mul(un, vn)?;
        Ok(self.sum(prod))
    }

    /// Pairwise cosine similarities between the rows of `a` (`p x d`) and
    /// the rows of `b` (`r x d`), as a `p x r` matrix.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar root.
    ///
    /// Intermediate gradients are recomputed from scratch on every sweep;
    /// leaf gradients add onto whatever is already stored, so call
    /// [`Graph::zero_grad`] between independent sweeps.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        for n in self.nodes.iter_mut().filter(|n| !n.is_leaf()) {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[idx].grad);
            if g.iter().any(|x| *x != 0.0) {
                self.propagate(idx, &g);
            }
            self.nodes[idx].grad = g;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if node.requires_grad {
            add_into(&mut node.grad, contrib);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = dims2(self.value(a), "matmul").expect("checked in forward");
                let r = self.value(b).cols();
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let mut da = vec![0.0; p * q];
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &bv[k * r..(k + 1) * r];
                            da[i * q + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(a, &da);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let mut db = vec![0.0; q * r];
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = av[i * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, gij) in db[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *d += aik * gij;
                            }
                        }
                    }
                    self.acc(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (p, q) = dims2(self.value(a), "transpose").expect("checked in forward");
                let mut da = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..q {
                        da[i * q + j] = g[j * p + i];
                    }
                }
                self.acc(a, &da);
            }
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da: Vec<f64> =
                        g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.acc(a, &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> =
                        g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.acc(b, &db);
                }
            }
            Op::AddRowVec(a, v) => {
                self.acc(a, g);
                if self.wants(v) {
                    let q = self.value(v).numel();
                    let mut dv = vec![0.0; q];
                    for row in g.chunks(q) {
                        add_into(&mut dv, row);
                    }
                    self.acc(v, &dv);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.acc(a, &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(a, g),
            Op::Silu(a) => {
                let k = if self.fault == Fault::SiluBackward { 1.5 } else { 1.0 };
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| {
                        let s = sigmoid(x);
                        k * gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc(a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.acc(a, &da);
            }
            Op::Exp(a) => {
                let y = self.nodes[idx].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, e)| gi * e).collect();
                self.acc(a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, x)| gi / x)
                    .collect();
                self.acc(a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gi, &x)| if x < lo || x > hi { 0.0 } else { *gi })
                    .collect();
                self.acc(a, &da);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.nodes[idx].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.acc(x, &dx);
            }
            Op::LogSoftmaxRows { x, excluded } => {
                let y = self.nodes[idx].value.data();
                let q = self.value(x).cols();
                let keep = |i: usize| excluded.as_ref().is_none_or(|m| !m[i]);
                let mut dx = vec![0.0; y.len()];
                for (i, grow) in g.chunks(q).enumerate() {
                    let row = i * q..(i + 1) * q;
                    let gsum: f64 = row.clone().filter(|&k| keep(k)).map(|k| grow[k - i * q]).sum();
                    for k in row.filter(|&k| keep(k)) {
                        dx[k] = g[k] - y[k].exp() * gsum;
                    }
                }
                self.acc(x, &dx);
            }
            Op::NormalizeRows(a) => {
                let xv = self.value(a).data();
                let y = self.nodes[idx].value.data();
                let q = self.value(a).cols();
                let mut dx = vec![0.0; xv.len()];
                for i in 0..xv.len() / q {
                    let row = i * q..(i + 1) * q;
                    let norm = xv[row.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > EPS {
                        let yg: f64 = row.clone().map(|k| y[k] * g[k]).sum();
                        for k in row {
                            dx[k] = (g[k] - y[k] * yg) / norm;
                        }
                    } else {
                        for k in row {
                            dx[k] = g[k] / EPS;
                        }
                    }
                }
                self.acc(a, &dx);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let q = gv.len();
                let p = xv.len() / q;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; q];
                let mut dbias = vec![0.0; q];
                let mut xhat = vec![0.0; q];
                let mut dxhat = vec![0.0; q];
                for i in 0..p {
                    let row = &xv[i * q..(i + 1) * q];
                    let grow = &g[i * q..(i + 1) * q];
                    let (mu, r) = row_moments(row);
                    for j in 0..q {
                        xhat[j] = (row[j] - mu) * r;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / q as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / q as f64;
                    for j in 0..q {
                        dx[i * q + j] = r * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(x, &dx);
                self.acc(gain, &dgain);
                self.acc(bias, &dbias);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(a).numel()];
                self.acc(a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let da = vec![g[0] / n as f64; n];
                self.acc(a, &da);
            }
            Op::MeanRows(a) => {
                let (p, q) = dims2(self.value(a), "mean_rows").expect("checked in forward");
                let mut da = Vec::with_capacity(p * q);
                for _ in 0..p {
                    da.extend(g.iter().map(|x| x / p as f64));
                }
                self.acc(a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for v in parts {
                    let n = self.value(v).numel();
                    self.acc(v, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let q = self.nodes[idx].value.cols();
                let mut col = 0;
                for v in parts {
                    let (p, w) = dims2(self.value(v), "concat_cols").expect("checked in forward");
                    let mut dv = Vec::with_capacity(p * w);
                    for i in 0..p {
                        dv.extend_from_slice(&g[i * q + col..i * q + col + w]);
                    }
                    self.acc(v, &dv);
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let q = self.value(a).cols();
                let mut da = vec![0.0; self.value(a).numel()];
                da[start * q..start * q + g.len()].copy_from_slice(g);
                self.acc(a, &da);
            }
            Op::SliceCols(a, start) => {
                let q = self.value(a).cols();
                let w = self.nodes[idx].value.cols();
                let mut da = vec![0.0; self.value(a).numel()];
                for (i, grow) in g.chunks(w).enumerate() {
                    da[i * q + start..i * q + start + w].copy_from_slice(grow);
                }
                self.acc(a, &da);
            }
            Op::GatherRows(a, index) => {
                let q = self.value(a).cols();
                let mut da = vec![0.0; self.value(a).numel()];
                for (k, &r) in index.iter().enumerate() {
                    add_into(&mut da[r * q..(r + 1) * q], &g[k * q..(k + 1) * q]);
                }
                self.acc(a, &da);
            }
            Op::GatherElems(a, index) => {
                let q = self.value(a).cols();
                let mut da = vec![0.0; self.value(a).numel()];
                for (k, &(r, c)) in index.iter().enumerate() {
                    da[r * q + c] += g[k];
                }
                self.acc(a, &da);
            }
        }
    }
}

/// Mean and reciprocal standard deviation of one row.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + EPS).sqrt())
}
