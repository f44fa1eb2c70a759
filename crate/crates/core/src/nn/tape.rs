use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{col_sums, mm, mm_at, mm_bt};
use super::{Parameter, Tensor};
use crate::linalg::SparseMatrix;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Gradients keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    ConcatRows(Vec<Var>),
    Relu(Var),
    NodeBias { h: Var, p: Var },
    GraphConv { op: Arc<SparseMatrix>, h: Var, w: Var },
    ChebConv { lap: Arc<SparseMatrix>, h: Var, theta: Var, basis: Vec<Vec<f64>> },
    TemporalConv { x: Var, w: Var, b: Var },
    MeanPoolTime(Var),
    SwapLastAxes(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Mse { pred: Var, target: Tensor },
    WeightedSum { x: Var, weights: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::ConcatRows(..) => "concat_rows",
            Op::Relu(..) => "relu",
            Op::NodeBias { .. } => "node_bias",
            Op::GraphConv { .. } => "graph_conv_spatial",
            Op::ChebConv { .. } => "graph_conv_cheb",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::MeanPoolTime(..) => "mean_pool_time",
            Op::SwapLastAxes(..) => "swap_last_axes",
            Op::Dropout { .. } => "dropout",
            Op::Mse { .. } => "mse_loss",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
    op: Op,
}

/// Compute record for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    min_relu_margin: f64,
    corrupt: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, min_relu_margin: f64::INFINITY, corrupt: None }
    }

    /// Test hook: scales the input gradients of every `op_name` node by 1.5.
    #[doc(hidden)]
    pub fn corrupt_gradients_of(&mut self, op_name: &'static str) {
        self.corrupt = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` seen by any relu so far.
    pub fn min_relu_margin(&self) -> f64 {
        self.min_relu_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Named leaf; receives a gradient entry when `requires_grad` is set.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, name: Some(name.into()), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.name.clone(), p.value.clone(), p.trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: false, name: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, name: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let out_dim = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{out_dim}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        mm(self.value(x).data(), self.value(w).data(), &mut out, rows, fan_in, out_dim);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        mm(self.value(a).data(), self.value(b).data(), &mut out, sa[0], sa[1], sb[1]);
        let value = Tensor::new(vec![sa[0], sb[1]], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Vertical concatenation of 2-D values with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[1],
            _ => return Err(Error::shape("concat_rows", "needs at least one 2-D input")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", format!("part {s:?}, expected [_, {cols}]")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.min_relu_margin = self.min_relu_margin.min(margin);
        self.push(value, Op::Relu(x), &[x])
    }

    /// Adds a per-node `[N, C]` matrix to every `[N, C]` slice of `h`.
    pub fn node_bias(&mut self, h: Var, p: Var) -> Result<Var> {
        let (hs, ps) = (self.shape(h).to_vec(), self.shape(p).to_vec());
        if ps.len() != 2 || hs.len() < 2 || hs[hs.len() - 2..] != ps[..] {
            return Err(Error::shape("node_bias", format!("features {hs:?}, prompt {ps:?}")));
        }
        let block = ps[0] * ps[1];
        let pv = self.value(p).data();
        let mut data = self.value(h).data().to_vec();
        for chunk in data.chunks_exact_mut(block) {
            for (a, b) in chunk.iter_mut().zip(pv) {
                *a += b;
            }
        }
        let value = Tensor::new(hs, data)?;
        self.push(value, Op::NodeBias { h, p }, &[h, p])
    }

    fn graph_dims(&self, op: &'static str, h: Var, n: usize, w_in: usize) -> Result<(usize, usize)> {
        let hs = self.shape(h);
        if hs.len() < 2 || hs[hs.len() - 2] != n || hs[hs.len() - 1] != w_in {
            return Err(Error::shape(op, format!("features {hs:?} for {n} nodes and {w_in} channels")));
        }
        let slices = hs[..hs.len() - 2].iter().product();
        Ok((slices, hs[hs.len() - 1]))
    }

    /// `S (H W)` applied to every `[N, C]` slice of `h`.
    pub fn graph_conv_spatial(&mut self, op: &Arc<SparseMatrix>, h: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || op.rows() != op.cols() {
            return Err(Error::shape("graph_conv_spatial", format!("weight {ws:?}")));
        }
        let n = op.rows();
        let (slices, c_in) = self.graph_dims("graph_conv_spatial", h, n, ws[0])?;
        let c_out = ws[1];
        let rows = slices * n;
        let mut z = vec![0.0; rows * c_out];
        mm(self.value(h).data(), self.value(w).data(), &mut z, rows, c_in, c_out);
        let mut out = vec![0.0; rows * c_out];
        let block = n * c_out;
        for (zs, os) in z.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            op.mul_rows_into(zs, c_out, os);
        }
        let mut shape = self.shape(h).to_vec();
        *shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::GraphConv { op: op.clone(), h, w }, &[h, w])
    }

    /// `sum_k T_k(L) H theta_k` with the Chebyshev recursion
    /// `T_0 = I, T_1 = L, T_k = 2 L T_{k-1} - T_{k-2}`; `theta` is `[K+1, C, C']`.
    pub fn graph_conv_cheb(&mut self, lap: &Arc<SparseMatrix>, h: Var, theta: Var) -> Result<Var> {
        let ts = self.shape(theta).to_vec();
        if ts.len() != 3 || ts[0] == 0 || lap.rows() != lap.cols() {
            return Err(Error::shape("graph_conv_cheb", format!("theta {ts:?}")));
        }
        let n = lap.rows();
        let (slices, c_in) = self.graph_dims("graph_conv_cheb", h, n, ts[1])?;
        let (order, c_out) = (ts[0], ts[2]);
        let rows = slices * n;
        let hv = self.value(h).data();
        let basis = chebyshev_basis(lap, hv, order, n, c_in, false);
        let mut out = vec![0.0; rows * c_out];
        let tv = self.value(theta).data();
        for (k, xk) in basis.iter().enumerate() {
            mm(xk, &tv[k * c_in * c_out..(k + 1) * c_in * c_out], &mut out, rows, c_in, c_out);
        }
        let mut shape = self.shape(h).to_vec();
        *shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::ChebConv { lap: lap.clone(), h, theta, basis }, &[h, theta])
    }

    /// Same-length convolution over the time axis of `x: [B, T, N, C]` with
    /// zero padding; `w: [K, C, C']` (K odd), `b: [C']`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 3 || ws[1] != xs[3] || ws[0] % 2 == 0 || bs != [ws[2]] {
            return Err(Error::shape("temporal_conv", format!("input {xs:?}, kernel {ws:?}, bias {bs:?}")));
        }
        let (batch, t, n, c_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (kernel, c_out) = (ws[0], ws[2]);
        let mut out = vec![0.0; batch * t * n * c_out];
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(self.value(b).data());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for_each_tap(batch, t, kernel, |bi, j, dst_t, src_t, len| {
            let src = &xv[((bi * t + src_t) * n) * c_in..((bi * t + src_t + len) * n) * c_in];
            let dst = &mut out[((bi * t + dst_t) * n) * c_out..((bi * t + dst_t + len) * n) * c_out];
            mm(src, &wv[j * c_in * c_out..(j + 1) * c_in * c_out], dst, len * n, c_in, c_out);
        });
        let value = Tensor::new(vec![batch, t, n, c_out], out)?;
        self.push(value, Op::TemporalConv { x, w, b }, &[x, w, b])
    }

    /// Mean over the time axis: `[B, T, N, C] -> [B, N, C]`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] == 0 {
            return Err(Error::shape("mean_pool_time", format!("{xs:?}")));
        }
        let (batch, t, block) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * block];
        let scale = 1.0 / t as f64;
        for bi in 0..batch {
            let dst = &mut out[bi * block..(bi + 1) * block];
            for ti in 0..t {
                let src = &xv[(bi * t + ti) * block..(bi * t + ti + 1) * block];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in dst {
                *o *= scale;
            }
        }
        let value = Tensor::new(vec![batch, xs[2], xs[3]], out)?;
        self.push(value, Op::MeanPoolTime(x), &[x])
    }

    /// `[A, B, C] -> [A, C, B]`.
    pub fn swap_last_axes(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("swap_last_axes", format!("{xs:?}")));
        }
        let value = Tensor::new(vec![xs[0], xs[2], xs[1]], swap_last(self.value(x).data(), xs[0], xs[1], xs[2]))?;
        self.push(value, Op::SwapLastAxes(x), &[x])
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut StreamRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("p", format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.numel() == 0 {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        let sum: f64 = pv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / pv.numel() as f64);
        self.push(value, Op::Mse { pred, target: target.clone() }, &[pred])
    }

    /// `sum_i x_i w_i`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.numel() {
            return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", xv.shape(), weights.shape())));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.clone() }, &[x])
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    ///
    /// Returns a gradient for every named leaf that requires one; leaves off
    /// the loss path get zeros. Frozen leaves are absent.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let scale = if self.corrupt == Some(node.op.name()) { 1.5 } else { 1.0 };
            let mut sink = Sink { nodes: &self.nodes, grads: &mut grads, scale };
            backprop(&self.nodes, &node.op, &node.value, g, &mut sink);
        }
        let mut out = Gradients::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(name), true, Op::Leaf) = (&node.name, node.requires_grad, &node.op) {
                let g = g.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
    scale: f64,
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, mut data: Vec<f64>) {
        if self.scale != 1.0 {
            for x in &mut data {
                *x *= self.scale;
            }
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: Tensor, sink: &mut Sink<'_>) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if sink.wants(v) {
                    sink.add(v, gd.to_vec());
                }
            }
        }
        Op::Linear { x, w, b } => {
            let ws = shape(*w);
            let (fan_in, out_dim) = (ws[0], ws[1]);
            let rows = gd.len() / out_dim.max(1);
            if sink.wants(*x) {
                let mut dx = vec![0.0; rows * fan_in];
                mm_bt(gd, val(*w), &mut dx, rows, out_dim, fan_in);
                sink.add(*x, dx);
            }
            if sink.wants(*w) {
                let mut dw = vec![0.0; fan_in * out_dim];
                mm_at(val(*x), gd, &mut dw, rows, fan_in, out_dim);
                sink.add(*w, dw);
            }
            if let Some(b) = b {
                if sink.wants(*b) {
                    let mut db = vec![0.0; out_dim];
                    col_sums(gd, &mut db, out_dim);
                    sink.add(*b, db);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if sink.wants(*a) {
                let mut da = vec![0.0; m * k];
                mm_bt(gd, val(*b), &mut da, m, n, k);
                sink.add(*a, da);
            }
            if sink.wants(*b) {
                let mut db = vec![0.0; k * n];
                mm_at(val(*a), gd, &mut db, m, k, n);
                sink.add(*b, db);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if sink.wants(p) {
                    sink.add(p, gd[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::Relu(x) => {
            if sink.wants(*x) {
                let dx = gd.iter().zip(val(*x)).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                sink.add(*x, dx);
            }
        }
        Op::NodeBias { h, p } => {
            if sink.wants(*h) {
                sink.add(*h, gd.to_vec());
            }
            if sink.wants(*p) {
                let block = nodes[p.0].value.numel();
                let mut dp = vec![0.0; block];
                for chunk in gd.chunks_exact(block) {
                    for (a, b) in dp.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                sink.add(*p, dp);
            }
        }
        Op::GraphConv { op, h, w } => {
            let ws = shape(*w);
            let (c_in, c_out) = (ws[0], ws[1]);
            let n = op.rows();
            let rows = gd.len() / c_out;
            let mut dz = vec![0.0; rows * c_out];
            let block = n * c_out;
            for (gs, zs) in gd.chunks_exact(block).zip(dz.chunks_exact_mut(block)) {
                op.mul_transpose_rows_into(gs, c_out, zs);
            }
            if sink.wants(*h) {
                let mut dh = vec![0.0; rows * c_in];
                mm_bt(&dz, val(*w), &mut dh, rows, c_out, c_in);
                sink.add(*h, dh);
            }
            if sink.wants(*w) {
                let mut dw = vec![0.0; c_in * c_out];
                mm_at(val(*h), &dz, &mut dw, rows, c_in, c_out);
                sink.add(*w, dw);
            }
        }
        Op::ChebConv { lap, h, theta, basis } => {
            let ts = shape(*theta);
            let (order, c_in, c_out) = (ts[0], ts[1], ts[2]);
            let n = lap.rows();
            let rows = gd.len() / c_out;
            let tv = val(*theta);
            if sink.wants(*theta) {
                let mut dt = vec![0.0; order * c_in * c_out];
                for (k, xk) in basis.iter().enumerate() {
                    mm_at(xk, gd, &mut dt[k * c_in * c_out..(k + 1) * c_in * c_out], rows, c_in, c_out);
                }
                sink.add(*theta, dt);
            }
            if sink.wants(*h) {
                let coeffs: Vec<Vec<f64>> = (0..order)
                    .map(|k| {
                        let mut r = vec![0.0; rows * c_in];
                        mm_bt(gd, &tv[k * c_in * c_out..(k + 1) * c_in * c_out], &mut r, rows, c_out, c_in);
                        r
                    })
                    .collect();
                sink.add(*h, chebyshev_adjoint(lap, &coeffs, n, c_in));
            }
        }
        Op::TemporalConv { x, w, b } => {
            let xs = shape(*x);
            let ws = shape(*w);
            let (batch, t, n, c_in) = (xs[0], xs[1], xs[2], xs[3]);
            let (kernel, c_out) = (ws[0], ws[2]);
            let want_x = sink.wants(*x);
            let want_w = sink.wants(*w);
            let mut dx = if want_x { vec![0.0; batch * t * n * c_in] } else { Vec::new() };
            let mut dw = if want_w { vec![0.0; kernel * c_in * c_out] } else { Vec::new() };
            let (xv, wv) = (val(*x), val(*w));
            for_each_tap(batch, t, kernel, |bi, j, dst_t, src_t, len| {
                let gs = &gd[((bi * t + dst_t) * n) * c_out..((bi * t + dst_t + len) * n) * c_out];
                let src_range = ((bi * t + src_t) * n) * c_in..((bi * t + src_t + len) * n) * c_in;
                if want_x {
                    mm_bt(gs, &wv[j * c_in * c_out..(j + 1) * c_in * c_out], &mut dx[src_range.clone()], len * n, c_out, c_in);
                }
                if want_w {
                    mm_at(&xv[src_range], gs, &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out], len * n, c_in, c_out);
                }
            });
            if want_x {
                sink.add(*x, dx);
            }
            if want_w {
                sink.add(*w, dw);
            }
            if sink.wants(*b) {
                let mut db = vec![0.0; c_out];
                col_sums(gd, &mut db, c_out);
                sink.add(*b, db);
            }
        }
        Op::MeanPoolTime(x) => {
            if sink.wants(*x) {
                let xs = shape(*x);
                let (batch, t, block) = (xs[0], xs[1], xs[2] * xs[3]);
                let scale = 1.0 / t as f64;
                let mut dx = vec![0.0; batch * t * block];
                for bi in 0..batch {
                    let src = &gd[bi * block..(bi + 1) * block];
                    for ti in 0..t {
                        for (d, s) in dx[(bi * t + ti) * block..(bi * t + ti + 1) * block].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                sink.add(*x, dx);
            }
        }
        Op::SwapLastAxes(x) => {
            if sink.wants(*x) {
                let s = out.shape();
                sink.add(*x, swap_last(gd, s[0], s[1], s[2]));
            }
        }
        Op::Dropout { x, mask } => {
            if sink.wants(*x) {
                sink.add(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
        }
        Op::Mse { pred, target } => {
            if sink.wants(*pred) {
                let scale = 2.0 * gd[0] / target.numel() as f64;
                let dp = val(*pred).iter().zip(target.data()).map(|(p, t)| scale * (p - t)).collect();
                sink.add(*pred, dp);
            }
        }
        Op::WeightedSum { x, weights } => {
            if sink.wants(*x) {
                sink.add(*x, weights.data().iter().map(|w| w * gd[0]).collect());
            }
        }
    }
}

/// Calls `f(batch, tap, dst_t, src_t, len)` for each contiguous run of time
/// steps where tap `j` of a same-padded kernel reads valid input.
fn for_each_tap(batch: usize, t: usize, kernel: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let pad = (kernel / 2) as isize;
    for bi in 0..batch {
        for j in 0..kernel {
            let shift = j as isize - pad;
            let dst_lo = (-shift).max(0) as usize;
            let dst_hi = (t as isize - shift).min(t as isize);
            if dst_hi <= dst_lo as isize {
                continue;
            }
            let len = dst_hi as usize - dst_lo;
            let src_lo = (dst_lo as isize + shift) as usize;
            f(bi, j, dst_lo, src_lo, len);
        }
    }
}

fn swap_last(src: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                out[(i * c + k) * b + j] = src[(i * b + j) * c + k];
            }
        }
    }
    out
}

/// `T_k(L) X` for `k < order`, per `[n, width]` slice of `x`.
fn chebyshev_basis(lap: &SparseMatrix, x: &[f64], order: usize, n: usize, width: usize, transpose: bool) -> Vec<Vec<f64>> {
    let apply = |src: &[f64], dst: &mut [f64]| {
        let block = n * width;
        for (s, d) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
            if transpose {
                lap.mul_transpose_rows_into(s, width, d);
            } else {
                lap.mul_rows_into(s, width, d);
            }
        }
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(order);
    basis.push(x.to_vec());
    if order > 1 {
        let mut x1 = vec![0.0; x.len()];
        apply(x, &mut x1);
        basis.push(x1);
    }
    for k in 2..order {
        let mut next = vec![0.0; x.len()];
        apply(&basis[k - 1], &mut next);
        for (v, prev) in next.iter_mut().zip(&basis[k - 2]) {
            *v = 2.0 * *v - prev;
        }
        basis.push(next);
    }
    basis
}

/// `sum_k T_k(L^T) R_k` by Clenshaw's recurrence.
fn chebyshev_adjoint(lap: &SparseMatrix, coeffs: &[Vec<f64>], n: usize, width: usize) -> Vec<f64> {
    let len = coeffs[0].len();
    let block = n * width;
    let apply_t = |src: &[f64]| {
        let mut dst = vec![0.0; len];
        for (s, d) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
            lap.mul_transpose_rows_into(s, width, d);
        }
        dst
    };
    let order = coeffs.len();
    let mut b1 = vec![0.0; len];
    let mut b2 = vec![0.0; len];
    for k in (1..order).rev() {
        let lb = apply_t(&b1);
        let bk: Vec<f64> = (0..len).map(|i| coeffs[k][i] + 2.0 * lb[i] - b2[i]).collect();
        b2 = b1;
        b1 = bk;
    }
    let lb = apply_t(&b1);
    (0..len).map(|i| coeffs[0][i] + lb[i] - b2[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn spatial_graph_conv_example() {
        let a = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let op = Arc::new(SparseMatrix::from_dense(&a));
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 1], &[2.0, 0.0]));
        let w = tape.constant(t(&[1, 1], &[1.0]));
        let y = tape.graph_conv_spatial(&op, h, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn mse_example_and_square_gradient() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 3.0]));
        let l = tape.mse_loss(p, &t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.5));

        // loss = w^2 at w = 3
        let mut tape = Tape::new();
        let w = tape.leaf("w", t(&[1], &[3.0]), true);
        let l = tape.mse_loss(w, &t(&[1], &[0.0])).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g["w"].data(), &[6.0]);
    }

    #[test]
    fn frozen_and_unused_leaves() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", t(&[1], &[2.0]), true);
        let frozen = tape.leaf("frozen", t(&[1], &[5.0]), false);
        let _unused = tape.leaf("unused", t(&[2], &[1.0, 1.0]), true);
        let s = tape.add(w, frozen).unwrap();
        let l = tape.mse_loss(s, &t(&[1], &[0.0])).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(!g.contains_key("frozen"));
        assert_eq!(g["unused"].data(), &[0.0, 0.0]);
        assert_eq!(g["w"].data(), &[14.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", t(&[1], &[2.0]), true);
        let c = tape.constant(t(&[1], &[4.0]));
        let _ = tape.relu(w).unwrap();
        let l = tape.weighted_sum(c, &t(&[1], &[1.0])).unwrap();
        assert_eq!(tape.backward(l).unwrap()["w"].data(), &[0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
        let l = tape.weighted_sum(w, &t(&[2], &[1.0, 1.0])).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l), Err(Error::RecordConsumed));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[2, 2], &[1.0; 4]));
        match tape.linear(x, w, None) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "linear"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let y = tape.add(x, x);
        assert_eq!(y, Err(Error::NonFinite { op: "add" }));
    }

    #[test]
    fn cheb_order_one_with_zero_theta0_is_laplacian_product() {
        let l = Matrix::from_rows(&[[0.0, -1.0, 0.2], [-1.0, 0.0, 0.3], [0.2, 0.3, -0.5]]).unwrap();
        let lap = Arc::new(SparseMatrix::from_dense(&l));
        let h = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]).unwrap();
        let theta1 = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
        let mut theta = alloc::vec![0.0; 4];
        theta.extend_from_slice(theta1.as_slice());
        let mut tape = Tape::new();
        let hv = tape.constant(t(&[3, 2], h.as_slice()));
        let tv = tape.constant(t(&[2, 2, 2], &theta));
        let y = tape.graph_conv_cheb(&lap, hv, tv).unwrap();
        let expected = l.matmul(&h).unwrap().matmul(&theta1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cheb_basis_matches_dense_recursion() {
        let l = Matrix::from_rows(&[[0.1, -0.4], [-0.4, 0.3]]).unwrap();
        let lap = SparseMatrix::from_dense(&l);
        let x = [1.0, -2.0];
        let basis = chebyshev_basis(&lap, &x, 4, 2, 1, false);
        let xm = Matrix::from_vec(2, 1, x.to_vec()).unwrap();
        let t2 = l.matmul(&l).unwrap().scale(2.0).sub(&Matrix::identity(2)).unwrap();
        let t3 = l.matmul(&t2).unwrap().scale(2.0).sub(&l).unwrap();
        for (k, tk) in [Matrix::identity(2), l.clone(), t2, t3].iter().enumerate() {
            let e = tk.matmul(&xm).unwrap();
            for (a, b) in basis[k].iter().zip(e.as_slice()) {
                assert!((a - b).abs() < 1e-14, "order {k}");
            }
        }
    }

    #[test]
    fn dropout_identity_and_determinism() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let mut rng = crate::rng::stream(3, "dropout");
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let a = tape.dropout(x, 0.5, &mut crate::rng::stream(3, "d")).unwrap();
        let b = tape.dropout(x, 0.5, &mut crate::rng::stream(3, "d")).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn temporal_conv_same_length() {
        // one node, one channel, kernel [1, 1, 1]: y_t = x_{t-1} + x_t + x_{t+1}
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.temporal_conv(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 1, 1]);
        assert_eq!(tape.value(y).data(), &[3.5, 6.5, 9.5, 7.5]);
    }

    #[test]
    fn swap_and_pool_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.swap_last_axes(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let h = tape.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 6.0]));
        let p = tape.mean_pool_time(h).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
    }
}
