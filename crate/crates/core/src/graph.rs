//! Streaming graph model and adjacency constructions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

/// Stable sensor identity, preserved across periods.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Graph of one period. `nodes` fixes the index order of every matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodGraph {
    pub period_index: usize,
    pub nodes: Vec<NodeId>,
    pub distances: Matrix,
    pub adjacency: Matrix,
}

impl PeriodGraph {
    /// Builds the graph and its thresholded Gaussian-kernel adjacency.
    pub fn new(
        period_index: usize,
        nodes: Vec<NodeId>,
        distances: Matrix,
        threshold: f64,
        sigma_override: Option<f64>,
    ) -> Result<Self> {
        if period_index == 0 {
            return Err(Error::invalid("period_index", "periods are numbered from 1"));
        }
        if distances.rows() != nodes.len() || !distances.is_square() {
            return Err(Error::shape(
                "period_graph",
                format!("{} nodes but {}x{} distances", nodes.len(), distances.rows(), distances.cols()),
            ));
        }
        check_unique(&nodes)?;
        let adjacency = build_adjacency(&distances, threshold, sigma_override)?;
        Ok(PeriodGraph { period_index, nodes, distances, adjacency })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n == id)
    }

    /// Induced subgraph on `ids`, keeping the order of `ids`.
    pub fn induced_subgraph(&self, ids: &[NodeId]) -> Result<PeriodGraph> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| self.index_of(id).ok_or_else(|| Error::UnknownNode(id.to_string())))
            .collect::<Result<_>>()?;
        let m = idx.len();
        let mut distances = Matrix::zeros(m, m);
        let mut adjacency = Matrix::zeros(m, m);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                distances.set(a, b, self.distances.get(i, j));
                adjacency.set(a, b, self.adjacency.get(i, j));
            }
        }
        Ok(PeriodGraph { period_index: self.period_index, nodes: ids.to_vec(), distances, adjacency })
    }
}

fn check_unique(nodes: &[NodeId]) -> Result<()> {
    let mut seen = BTreeMap::new();
    for n in nodes {
        if seen.insert(n, ()).is_some() {
            return Err(Error::DuplicateNode(n.to_string()));
        }
    }
    Ok(())
}

/// Expansion-only sequence of period graphs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamGraph {
    periods: Vec<PeriodGraph>,
}

impl StreamGraph {
    pub fn new(periods: Vec<PeriodGraph>) -> Result<Self> {
        let mut s = StreamGraph::default();
        for p in periods {
            s.push(p)?;
        }
        Ok(s)
    }

    /// Appends a period. Carried-over nodes must form a prefix of the new node order.
    pub fn push(&mut self, graph: PeriodGraph) -> Result<()> {
        if graph.period_index != self.periods.len() + 1 {
            return Err(Error::invalid(
                "period_index",
                format!("expected {}, got {}", self.periods.len() + 1, graph.period_index),
            ));
        }
        if let Some(prev) = self.periods.last() {
            diff_nodes(prev, &graph)?;
            if graph.nodes[..prev.len()] != prev.nodes[..] {
                return Err(Error::invalid(
                    "nodes",
                    format!("period {} reorders carried-over nodes", graph.period_index),
                ));
            }
        }
        self.periods.push(graph);
        Ok(())
    }

    pub fn periods(&self) -> &[PeriodGraph] {
        &self.periods
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }
}

/// Nodes added between two periods.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDiff {
    /// New ids in `cur` index order.
    pub new_ids: Vec<NodeId>,
    /// `carry_index_map[i]` is the index in `cur` of node `i` of `prev`.
    pub carry_index_map: Vec<usize>,
}

pub fn diff_nodes(prev: &PeriodGraph, cur: &PeriodGraph) -> Result<NodeDiff> {
    let cur_index: BTreeMap<&NodeId, usize> = cur.nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let carry_index_map = prev
        .nodes
        .iter()
        .map(|n| cur_index.get(n).copied().ok_or_else(|| Error::ExpansionViolation(n.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let prev_set: BTreeMap<&NodeId, ()> = prev.nodes.iter().map(|n| (n, ())).collect();
    let new_ids = cur.nodes.iter().filter(|n| !prev_set.contains_key(n)).cloned().collect();
    Ok(NodeDiff { new_ids, carry_index_map })
}

/// Thresholded Gaussian kernel `exp(-d^2 / sigma^2)` with zero diagonal.
///
/// Without `sigma_override`, sigma is the population standard deviation of
/// the off-diagonal distances, or 1 when those are all equal.
pub fn build_adjacency(distances: &Matrix, threshold: f64, sigma_override: Option<f64>) -> Result<Matrix> {
    if !distances.is_square() {
        return Err(Error::shape(
            "build_adjacency",
            format!("distances are {}x{}", distances.rows(), distances.cols()),
        ));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid("r", format!("{threshold} is outside [0, 1)")));
    }
    if let Some(&d) = distances.as_slice().iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
        return Err(Error::invalid("distances", format!("entry {d} is not a finite nonnegative distance")));
    }
    let sigma = match sigma_override {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::invalid("sigma", format!("{s} is not positive"))),
        None => off_diagonal_std(distances),
    };
    let n = distances.rows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distances.get(i, j);
            let w = (-(d * d) / (sigma * sigma)).exp();
            if w >= threshold && w > 0.0 {
                a.set(i, j, w);
            }
        }
    }
    Ok(a)
}

fn off_diagonal_std(distances: &Matrix) -> f64 {
    let n = distances.rows();
    let count = n * n.saturating_sub(1);
    if count == 0 {
        return 1.0;
    }
    let off = || (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
    let mean = off().map(|(i, j)| distances.get(i, j)).sum::<f64>() / count as f64;
    let var = off().map(|(i, j)| (distances.get(i, j) - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("normalize_adjacency", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / (a.row(i).iter().sum::<f64>() + 1.0).sqrt())
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if w != 0.0 {
                out.set(i, j, inv_sqrt[i] * w * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

pub const POWER_ITERATION_TOL: f64 = 1e-8;
pub const POWER_ITERATION_MAX_ITERS: usize = 1000;


/// Largest eigenvalue of a symmetric positive semidefinite matrix.
///
/// Lanczos iteration with full reorthogonalization from a fixed pseudo-random
/// start vector: the same Krylov space power iteration explores, but reading
/// off its largest Ritz value instead of the last Rayleigh quotient. Plain
/// power iteration stalls when the top two eigenvalues nearly tie and can
/// settle on the second one when the start vector barely touches the first.
/// The space is grown until it becomes invariant or spans every dimension;
/// past `POWER_ITERATION_MAX_ITERS` steps the Ritz value must have moved by at
/// most `POWER_ITERATION_TOL * max(1, lambda)` in the last step.
pub fn largest_eigenvalue(m: &Matrix) -> Result<f64> {
    let n = m.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut start = rng::stream(0, "power-iteration");
    let mut q: Vec<f64> = (0..n).map(|_| rng::normal(&mut start)).collect();
    normalize(&mut q);
    let bound = (0..n).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let breakdown = 1e-12 * bound.max(1.0);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut w = alloc::vec![0.0; n];
    for step in 0..n.min(POWER_ITERATION_MAX_ITERS) {
        for (i, out) in w.iter_mut().enumerate() {
            *out = m.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
        }
        alpha.push(dot(&q, &w));
        basis.push(q);
        // two passes of Gram-Schmidt keep the basis orthogonal to rounding
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm <= breakdown || step + 1 == n {
            return Ok(tridiagonal_max(&alpha, &beta));
        }
        beta.push(norm);
        q = w.iter().map(|x| x / norm).collect();
    }
    let lambda = tridiagonal_max(&alpha, &beta);
    let previous = tridiagonal_max(&alpha[..alpha.len() - 1], &beta[..beta.len() - 2]);
    let residual = (lambda - previous).abs();
    if residual <= POWER_ITERATION_TOL * lambda.abs().max(1.0) {
        Ok(lambda)
    } else {
        Err(Error::NoConvergence { residual })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta`, by Sturm-count bisection. Returns the
/// upper end of the final bracket.
fn tridiagonal_max(alpha: &[f64], beta: &[f64]) -> f64 {
    let m = alpha.len();
    let radius = |k: usize| {
        let left = if k > 0 { beta[k - 1].abs() } else { 0.0 };
        let right = if k + 1 < m { beta[k].abs() } else { 0.0 };
        left + right
    };
    let mut lo = (0..m).map(|k| alpha[k] - radius(k)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..m).map(|k| alpha[k] + radius(k)).fold(f64::NEG_INFINITY, f64::max);
    // eigenvalues below x, from the signs of the LDL^T pivots of T - xI
    let below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for k in 0..m {
            let off = if k > 0 { beta[k - 1] * beta[k - 1] } else { 0.0 };
            d = alpha[k] - x - if k > 0 { off / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * (x.abs() + 1.0);
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == m {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= norm;
    }
}

/// `2L/lambda_max - I` for the combinatorial Laplacian `L = D - A`.
/// The zero graph uses `lambda_max = 1`.
pub fn scaled_laplacian(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("scaled_laplacian", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    let mut l = a.scale(-1.0);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        l.set(i, i, l.get(i, i) + deg);
    }
    let mut lambda_max = largest_eigenvalue(&l)?;
    if lambda_max <= 0.0 {
        lambda_max = 1.0;
    }
    let mut out = l.scale(2.0 / lambda_max);
    for i in 0..n {
        out.set(i, i, out.get(i, i) - 1.0);
    }
    Ok(out)
}
