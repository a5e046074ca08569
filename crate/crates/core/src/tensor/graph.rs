use super::{gemm, Tensor, EPS_NORM, EPS_PROB};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    /// `argmax[e]` is the input row that produced output element `e`.
    GroupMax(Var, Vec<usize>),
    L2Normalize(Var, Vec<f64>),
    /// Per-column `1/sqrt(var + eps)`.
    Standardize(Var, Vec<f64>),
    Softmax(Var, f64),
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
        denom: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order; `backward` walks them in reverse.
///
/// Nodes are only ever appended, so a node's inputs always have smaller
/// indices than the node itself and reverse index order is a valid
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input; its gradient is available after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated into a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = xv.dims2();
        if bv.len() != c {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c).take(r) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y)
            .map(|v| self.push(v, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y)
            .map(|v| self.push(v, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    fn elementwise(&self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Output row `r` is input row `indices[r]`.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather index {bad} out of {r} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::matrix(indices.len(), c, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, indices), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (av.dims2(), bv.dims2());
        if ra != rb {
            return Err(shape_err("concat_cols", av, bv));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let value = Tensor::matrix(ra, ca + cb, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, c, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if start >= end || end > r {
            return Err(Error::invalid(format!("row slice {start}..{end} of {r} rows")));
        }
        let value = Tensor::matrix(end - start, c, xv.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Column-wise maximum over consecutive blocks of `group` rows.
    ///
    /// Ties resolve to the earliest row in the block.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(format!("{r} rows do not split into groups of {group}")));
        }
        let groups = r / group;
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        let data = xv.data();
        for g in 0..groups {
            let dst = &mut out[g * c..(g + 1) * c];
            let idx = &mut argmax[g * c..(g + 1) * c];
            for row in g * group..(g + 1) * group {
                let src = &data[row * c..(row + 1) * c];
                for j in 0..c {
                    if src[j] > dst[j] {
                        dst[j] = src[j];
                        idx[j] = row;
                    }
                }
            }
        }
        let value = Tensor::matrix(groups, c, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GroupMax(x, argmax), rg))
    }

    /// Scales each row to unit norm; near-zero rows are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {norm:e}, cannot normalize"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize(x, norms), rg))
    }

    /// Shifts and scales every column to zero mean and unit variance over the
    /// rows (population variance plus `eps`), without learned affine terms.
    pub fn standardize_columns(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("standardization epsilon {eps}")));
        }
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let data = xv.data();
        let mut out = data.to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for j in 0..c {
            let mean = (0..r).map(|i| data[i * c + j]).sum::<f64>() / r as f64;
            let var = (0..r).map(|i| (data[i * c + j] - mean).powi(2)).sum::<f64>() / r as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..r {
                out[i * c + j] = (data[i * c + j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Standardize(x, inv_std), rg))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = super::softmax_rows(self.value(x), temperature)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, temperature), rg))
    }

    /// `-(1/denom)·Σ target·ln(max(probs, EPS_PROB))`; `target` is a constant.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor, denom: f64) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != target.shape() {
            return Err(shape_err("cross_entropy", pv, target));
        }
        if !(denom > 0.0) {
            return Err(Error::invalid(format!("cross-entropy denominator {denom}")));
        }
        if pv.data().iter().chain(target.data()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in cross-entropy input".into()));
        }
        let mut loss = 0.0;
        for (t, p) in target.data().iter().zip(pv.data()) {
            if *t != 0.0 {
                loss -= t * p.max(EPS_PROB).ln();
            }
        }
        let value = Tensor::scalar(loss / denom);
        let rg = self.rg(probs);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                target: target.data().to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// `offset + Σ weight·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)], offset: f64) -> Result<Var> {
        let mut total = offset;
        for &(v, w) in terms {
            let tv = self.value(v);
            if tv.len() != 1 {
                return Err(Error::invalid(format!("weighted_sum term has shape {:?}", tv.shape())));
            }
            total += w * tv.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Accumulates d`loss`/d(leaf) into every reachable differentiable leaf.
    ///
    /// Gradients from a previous call are discarded. Intermediate gradients
    /// are released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (target, contribution) in self.local_grads(i, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[target.0].grad {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), true, &mut da, 0.0);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g, false, &mut db, 0.0);
                    out.push((*b, db));
                }
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.rg(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::GatherRows(x, idx) => {
                let (r, c) = val(*x).dims2();
                let mut dx = vec![0.0; r * c];
                for (row, &src) in idx.iter().enumerate() {
                    let d = &mut dx[src * c..(src + 1) * c];
                    d.iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(a, b)| *a += b);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut da = Vec::with_capacity(g.len() / (ca + cb) * ca);
                let mut db = Vec::with_capacity(g.len() / (ca + cb) * cb);
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    out.push((*p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::GroupMax(x, argmax) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (e, (&src, gv)) in argmax.iter().zip(g).enumerate() {
                    dx[src * c + e % c] += gv;
                }
                out.push((*x, dx));
            }
            Op::L2Normalize(x, norms) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out.push((*x, dx));
            }
            Op::Standardize(x, inv_std) => {
                let y = node.value.data();
                let c = inv_std.len();
                let r = y.len() / c;
                let n = r as f64;
                let mut dx = vec![0.0; y.len()];
                for (j, inv) in inv_std.iter().enumerate() {
                    let sum_g: f64 = (0..r).map(|i| g[i * c + j]).sum();
                    let sum_gy: f64 = (0..r).map(|i| g[i * c + j] * y[i * c + j]).sum();
                    for i in 0..r {
                        let e = i * c + j;
                        dx[e] = inv * (g[e] - sum_g / n - y[e] * sum_gy / n);
                    }
                }
                out.push((*x, dx));
            }
            Op::Softmax(x, t) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot) / t;
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { probs, target, denom } => {
                let p = val(*probs).data();
                let scale = g[0] / denom;
                let dp = target
                    .iter()
                    .zip(p)
                    .map(|(t, pv)| {
                        if *t != 0.0 && *pv > EPS_PROB {
                            -scale * t / pv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*probs, dp));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, vec![g[0] * w]));
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::SumSquares(x) => out.push((*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect())),
        }
        out
    }
}
