//! Dense 64-bit tensors, a tape-based reverse-mode graph, and the optimizer
//! that consumes its gradients.

mod graph;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig, CosineSchedule};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const EPS_PROB: f64 = 1e-12;
/// Rows with a Euclidean norm at or below this cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a matrix; a 1-D tensor is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::matrix(m, n, out)
    }
}

/// `c = a·b + beta·c` where either operand may be read transposed.
///
/// `a` is `m×k` (stored `k×m` when `ta`), `b` is `k×n` (stored `n×k` when `tb`),
/// `c` is `m×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked above to cover every index the strides
    // address, and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax of `logits / temperature` with max-subtraction.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let (r, c) = logits.dims2();
    let mut out = logits.data.clone();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c], temperature);
    }
    Tensor::new(logits.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-Σ target·ln(max(online, EPS_PROB))` for two distributions.
pub fn cross_entropy_dist(target: &[f64], online: &[f64]) -> Result<f64> {
    if target.len() != online.len() {
        return Err(Error::Shape {
            op: "cross_entropy_dist",
            lhs: vec![target.len()],
            rhs: vec![online.len()],
        });
    }
    if target.iter().chain(online).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in cross-entropy input".into()));
    }
    Ok(-target
        .iter()
        .zip(online)
        .map(|(t, o)| t * o.max(EPS_PROB).ln())
        .sum::<f64>())
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows(v: &Tensor) -> Result<Tensor> {
    let (r, c) = v.dims2();
    let mut out = v.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > EPS_NORM) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {norm:e}, cannot normalize"
            )));
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(v.shape.clone(), out)
}
