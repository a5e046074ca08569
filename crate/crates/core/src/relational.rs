//! Cascaded relational consistency over a FIFO memory bank.
//!
//! Each embedding is described by its softmax similarity distribution over
//! the bank. Two consistency terms are combined: weak → strong
//! (`H(r_w, r_s)`) and original → weak (`H(r, r_w)`). Targets are always
//! gradient-stopped; only the online side is trained.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};

/// Tolerance on the unit norm of stored embeddings.
const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity queue of unit-norm embeddings; the oldest entry leaves first.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid(format!("memory bank {capacity}×{dim}")));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends each row of `embeddings` in order, evicting the oldest entries
    /// once full. The whole batch is validated before anything is stored.
    pub fn push(&mut self, embeddings: &Tensor) -> Result<()> {
        let (rows, cols) = embeddings.dims2();
        if cols != self.dim {
            return Err(Error::Shape {
                op: "bank_push",
                lhs: vec![self.dim],
                rhs: embeddings.shape().to_vec(),
            });
        }
        for r in 0..rows {
            let norm = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::invalid(format!("bank entry {r} has norm {norm}")));
            }
        }
        for r in 0..rows {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(embeddings.row(r).to_vec());
        }
        Ok(())
    }

    /// Bank contents as a `[d × len]` matrix, ready to right-multiply embeddings.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Degenerate("memory bank is empty".into()));
        }
        let n = self.len();
        let mut data = vec![0.0; self.dim * n];
        for (j, e) in self.entries.iter().enumerate() {
            for (i, v) in e.iter().enumerate() {
                data[i * n + j] = *v;
            }
        }
        Tensor::matrix(self.dim, n, data)
    }

    /// Places a snapshot of the bank on the graph as a constant.
    pub fn bind(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.constant(self.transposed()?))
    }
}

/// Softmax temperatures for the three relational distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperatureSet {
    /// Original-sample distribution, target of the original → weak term.
    pub target: f64,
    /// Weak distribution when it is the target of the weak → strong term.
    pub weak_target: f64,
    /// Weak distribution when it is the online side of the original → weak term.
    pub weak_online: f64,
    /// Strong distribution, online side of the weak → strong term.
    pub strong: f64,
}

impl Default for TemperatureSet {
    fn default() -> Self {
        Self {
            target: 0.03,
            weak_target: 0.05,
            weak_online: 0.08,
            strong: 0.12,
        }
    }
}

impl TemperatureSet {
    pub fn validate(&self) -> Result<()> {
        let all = [self.target, self.weak_target, self.weak_online, self.strong];
        if all.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid(format!("temperatures must be positive: {all:?}")));
        }
        if !(self.target < self.weak_online) {
            return Err(Error::invalid(
                "original-sample temperature must be below the weak online temperature",
            ));
        }
        if !(self.weak_target < self.strong) {
            return Err(Error::invalid(
                "weak target temperature must be below the strong temperature",
            ));
        }
        Ok(())
    }
}

/// Softmax of cosine similarities between unit-norm `z` and every bank entry.
pub fn similarity_distribution(z: &[f64], bank: &MemoryBank, temperature: f64) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::Degenerate("memory bank is empty".into()));
    }
    if z.len() != bank.dim() {
        return Err(Error::Shape {
            op: "similarity_distribution",
            lhs: vec![z.len()],
            rhs: vec![bank.dim()],
        });
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sims: Vec<f64> = bank
        .entries()
        .map(|e| {
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (zn * en)
        })
        .collect();
    let n = sims.len();
    Ok(softmax_rows(&Tensor::matrix(1, n, sims)?, temperature)?.into_data())
}

/// Row-wise distributions of unit-norm embeddings `z` against a bound bank.
pub fn similarity_rows(g: &mut Graph, z: Var, bank: Var, temperature: f64) -> Result<Var> {
    let sims = g.matmul(z, bank)?;
    g.softmax(sims, temperature)
}

/// Mean cross-entropy from a gradient-stopped target to an online
/// distribution, both computed against the same bank.
fn consistency(g: &mut Graph, target_z: Var, target_t: f64, online_z: Var, online_t: f64, bank: Var) -> Result<Var> {
    let target = similarity_rows(g, target_z, bank, target_t)?;
    let target = g.value(target).clone();
    let online = similarity_rows(g, online_z, bank, online_t)?;
    let rows = target.rows() as f64;
    g.cross_entropy(online, &target, rows)
}

/// `H(r_w, r_s)`: weak embeddings give the target, strong ones are trained.
pub fn loss_weak_strong(g: &mut Graph, z_weak: Var, z_strong: Var, bank: Var, temps: &TemperatureSet) -> Result<Var> {
    consistency(g, z_weak, temps.weak_target, z_strong, temps.strong, bank)
}

/// `H(r, r_w)`: original embeddings give the target, weak ones are trained.
pub fn loss_orig_weak(g: &mut Graph, z_orig: Var, z_weak: Var, bank: Var, temps: &TemperatureSet) -> Result<Var> {
    consistency(g, z_orig, temps.target, z_weak, temps.weak_online, bank)
}

#[derive(Clone, Copy, Debug)]
pub struct RelationalTerms {
    pub total: Var,
    pub weak_strong: Var,
    pub orig_weak: Var,
}

/// `H(r_w, r_s) + λ·H(r, r_w)`.
///
/// `z_orig` and `z_weak_target` only ever serve as targets, so they may come
/// from a separate (e.g. moving-average) encoder; `z_weak` is the online weak
/// embedding.
pub fn relational_loss(
    g: &mut Graph,
    z_orig: Var,
    z_weak_target: Var,
    z_weak: Var,
    z_strong: Var,
    bank: Var,
    temps: &TemperatureSet,
    lambda: f64,
) -> Result<RelationalTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("relational weight {lambda}")));
    }
    let weak_strong = loss_weak_strong(g, z_weak_target, z_strong, bank, temps)?;
    let orig_weak = loss_orig_weak(g, z_orig, z_weak, bank, temps)?;
    let total = g.weighted_sum(&[(weak_strong, 1.0), (orig_weak, lambda)], 0.0)?;
    Ok(RelationalTerms {
        total,
        weak_strong,
        orig_weak,
    })
}
