use super::kernels::{gemm, sigmoid, softmax_row};
use super::{broadcast_map, broadcast_shapes, numel, strides, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// Matrix index into `a` and `b` for every output matrix.
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Silu(Var),
    MatMul { a: Var, b: Var, tb: bool, plan: MatmulPlan },
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, base: f64 },
    RepeatKv { x: Var, n_rep: usize },
    Pick { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Node order is insertion order; every node's inputs
/// precede it, and [`Graph::backward`] walks the tape in exact reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that never records gradients: every leaf is treated as a
    /// constant regardless of its `requires_grad` flag.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into a `requires_grad` leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Inserts a leaf. It participates in differentiation when
    /// `t.requires_grad()` is set and the graph is recording.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        let needs_grad = self.recording && t.requires_grad();
        if !self.recording {
            t.set_requires_grad(false);
        }
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push_raw(value, op, needs_grad)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data) = if sa == sb {
            (sa.to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let shape = broadcast_shapes(op_name, sa, sb)?;
            let ma = broadcast_map(&shape, sa);
            let mb = broadcast_map(&shape, sb);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            (shape, data)
        };
        Ok(self.push(shape, data, op, &[a, b]))
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

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push(shape, data, Op::Scale(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        self.push(shape, data, Op::Exp(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(shape, data, Op::Silu(x), &[x])
    }

    /// `a @ b` over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` where the transpose swaps the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (out_shape, plan) = if sb.len() == 2 {
            // Fold all leading axes of `a` into rows: one large GEMM.
            let rows = numel(&sa) / k;
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            (
                out_shape,
                MatmulPlan {
                    m: rows,
                    k,
                    n,
                    a_idx: vec![0],
                    b_idx: vec![0],
                },
            )
        } else {
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| Error::shape("matmul", &sa, &sb))?;
            let a_idx = broadcast_map(&batch, ba);
            let b_idx = broadcast_map(&batch, bb);
            let mut out_shape = batch;
            out_shape.extend([m, n]);
            (out_shape, MatmulPlan { m, k, n, a_idx, b_idx })
        };
        let (da, db) = (self.data(a), self.data(b));
        let (pm, pk, pn) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; numel(&out_shape)];
        let body = |(bi, c): (usize, &mut [f64])| {
            let ai = plan.a_idx[bi] * pm * pk;
            let bj = plan.b_idx[bi] * pk * pn;
            gemm(pm, pk, pn, &da[ai..], false, &db[bj..], tb, c, false);
        };
        if plan.a_idx.len() > 1 && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(pm * pn).enumerate().for_each(body);
        } else {
            out.chunks_mut(pm * pn).enumerate().for_each(body);
        }
        Ok(self.push(out_shape, out, Op::MatMul { a, b, tb, plan }, &[a, b]))
    }

    /// Softmax along `axis`, stabilised by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut row = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (t, r) in row.iter_mut().enumerate() {
                    *r = src[base + t * inner];
                }
                softmax_row(&row, &mut res);
                for (t, r) in res.iter().enumerate() {
                    out[base + t * inner] = *r;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis with a causal mask on the last two axes:
    /// row `i` attends to columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape("causal_softmax", &shape, &shape));
        }
        let s = shape[r - 1];
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (row_idx, (o, i)) in out.chunks_mut(s).zip(src.chunks(s)).enumerate() {
            let q = row_idx % s;
            softmax_row(&i[..=q], &mut o[..=q]);
        }
        Ok(self.push(shape, out, Op::CausalSoftmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::Contract("log_softmax on a scalar".into()))?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (o, row) in out.chunks_mut(len).zip(src.chunks(len)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (a, b) in o.iter_mut().zip(row) {
                *a = b - lse;
            }
        }
        Ok(self.push(shape, out, Op::LogSoftmax(x), &[x]))
    }

    /// RMS normalisation over the last axis, scaled by `weight`.
    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(weight);
        let d = *shape.last().unwrap_or(&0);
        if ws != [d] {
            return Err(Error::shape("rmsnorm", &shape, ws));
        }
        let (src, w) = (self.data(x), self.data(weight));
        let mut out = vec![0.0; src.len()];
        let mut inv_rms = Vec::with_capacity(src.len() / d);
        for (o, row) in out.chunks_mut(d).zip(src.chunks(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((a, b), c) in o.iter_mut().zip(row).zip(w) {
                *a = b * inv * c;
            }
        }
        Ok(self.push(shape, out, Op::RmsNorm { x, w: weight, inv_rms }, &[x, weight]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if numel(shape) != numel(src) || shape.contains(&0) {
            return Err(Error::shape("reshape", src, shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_map(&out_shape, &eff);
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(out_shape, data, Op::Permute { x, map }, &[x]))
    }

    /// Row lookup: `table[V, D]` indexed by `ids` (laid out as `ids_shape`).
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", &ts, ids_shape));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", &[ids.len()], ids_shape));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotary position embedding on `[.., seq, head_dim]`; the position of a
    /// row is its index along the second-to-last axis.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 1].is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "rope needs [.., seq, even head_dim], got {shape:?}"
            )));
        }
        let mut out = self.data(x).to_vec();
        rotate(&mut out, shape[r - 2], shape[r - 1], base, 1.0);
        Ok(self.push(shape, out, Op::Rope { x, base }, &[x]))
    }

    /// `[b, kv_heads, s, d]` → `[b, kv_heads * n_rep, s, d]`; query head `h`
    /// reads key/value head `h / n_rep`.
    pub fn repeat_kv(&mut self, x: Var, n_rep: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || n_rep == 0 {
            return Err(Error::Contract(format!(
                "repeat_kv needs rank-4 input and n_rep >= 1, got {shape:?} x{n_rep}"
            )));
        }
        if n_rep == 1 {
            return self.reshape(x, &shape);
        }
        let block = shape[2] * shape[3];
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len() * n_rep);
        for head in src.chunks(block) {
            for _ in 0..n_rep {
                data.extend_from_slice(head);
            }
        }
        let out_shape = vec![shape[0], shape[1] * n_rep, shape[2], shape[3]];
        Ok(self.push(out_shape, data, Op::RepeatKv { x, n_rep }, &[x]))
    }

    /// Gathers one entry per row along the last axis.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::Contract("pick on a scalar".into()))?;
        let rows = numel(&shape) / len;
        if idx.len() != rows {
            return Err(Error::shape("pick", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Input(format!("index {bad} out of range for axis of {len}")));
        }
        let src = self.data(x);
        let data = idx.iter().enumerate().map(|(r, &i)| src[r * len + i]).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(out_shape, data, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added into every
    /// reachable `requires_grad` leaf; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        leaf_grads.push((i, dy));
                    }
                }
                Op::Add(a, b) => {
                    reduce_into(&mut adj, nodes, *a, &node.value, &dy, |g| g);
                    reduce_into(&mut adj, nodes, *b, &node.value, &dy, |g| g);
                }
                Op::Sub(a, b) => {
                    reduce_into(&mut adj, nodes, *a, &node.value, &dy, |g| g);
                    reduce_into(&mut adj, nodes, *b, &node.value, &dy, |g| -g);
                }
                Op::Mul(a, b) => {
                    let out = node.value.shape();
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if !nodes[this.0].needs_grad {
                            continue;
                        }
                        let od = nodes[other.0].value.data();
                        let om = expand_map(out, nodes[other.0].value.shape());
                        let prod: Vec<f64> = match om {
                            None => dy.iter().zip(od).map(|(g, o)| g * o).collect(),
                            Some(m) => dy.iter().zip(&m).map(|(g, &j)| g * od[j]).collect(),
                        };
                        reduce_into(&mut adj, nodes, this, &node.value, &prod, |g| g);
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        dx.iter_mut().zip(&dy).for_each(|(d, g)| *d += g * c);
                    }
                }
                Op::Exp(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for ((d, g), v) in dx.iter_mut().zip(&dy).zip(y) {
                            *d += g * v;
                        }
                    }
                }
                Op::Silu(x) => {
                    let xd = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for ((d, g), &v) in dx.iter_mut().zip(&dy).zip(xd) {
                            let s = sigmoid(v);
                            *d += g * s * (1.0 + v * (1.0 - s));
                        }
                    }
                }
                Op::MatMul { a, b, tb, plan } => {
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        for (bi, g) in dy.chunks(m * n).enumerate() {
                            let ai = plan.a_idx[bi] * m * k;
                            let bj = plan.b_idx[bi] * k * n;
                            gemm(m, n, k, g, false, &bd[bj..], !tb, &mut da[ai..ai + m * k], true);
                        }
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        for (bi, g) in dy.chunks(m * n).enumerate() {
                            let ai = plan.a_idx[bi] * m * k;
                            let bj = plan.b_idx[bi] * k * n;
                            let dst = &mut db[bj..bj + k * n];
                            if *tb {
                                gemm(n, m, k, g, true, &ad[ai..], false, dst, true);
                            } else {
                                gemm(k, m, n, &ad[ai..], true, g, false, dst, true);
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let s: f64 = (0..len).map(|t| dy[base + t * inner] * y[base + t * inner]).sum();
                                for t in 0..len {
                                    let j = base + t * inner;
                                    dx[j] += y[j] * (dy[j] - s);
                                }
                            }
                        }
                    }
                }
                Op::CausalSoftmax(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let len = *node.value.shape().last().unwrap();
                        softmax_rows_backward(dx, &dy, y, len);
                    }
                }
                Op::LogSoftmax(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let len = *node.value.shape().last().unwrap();
                        for ((d, g), row) in dx.chunks_mut(len).zip(dy.chunks(len)).zip(y.chunks(len)) {
                            let s: f64 = g.iter().sum();
                            for ((a, b), l) in d.iter_mut().zip(g).zip(row) {
                                *a += b - l.exp() * s;
                            }
                        }
                    }
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let d = *node.value.shape().last().unwrap();
                    let xd = nodes[x.0].value.data();
                    let wd = nodes[w.0].value.data();
                    if let Some(dw) = slot(&mut adj, nodes, *w) {
                        for ((g, row), inv) in dy.chunks(d).zip(xd.chunks(d)).zip(inv_rms) {
                            for ((a, b), v) in dw.iter_mut().zip(g).zip(row) {
                                *a += b * v * inv;
                            }
                        }
                    }
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let mut dn = vec![0.0; d];
                        for (((out, g), row), inv) in dx.chunks_mut(d).zip(dy.chunks(d)).zip(xd.chunks(d)).zip(inv_rms)
                        {
                            let mut dot = 0.0;
                            for t in 0..d {
                                dn[t] = g[t] * wd[t];
                                dot += dn[t] * row[t] * inv;
                            }
                            let mean = dot / d as f64;
                            for t in 0..d {
                                out[t] += (dn[t] - row[t] * inv * mean) * inv;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += dy[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let g = dy[0] / dx.len() as f64;
                        dx.iter_mut().for_each(|d| *d += g);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        dx.iter_mut().zip(&dy).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Permute { x, map } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for (g, &j) in dy.iter().zip(map) {
                            dx[j] += g;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(dt) = slot(&mut adj, nodes, *table) {
                        let d = nodes[table.0].value.shape()[1];
                        for (g, &id) in dy.chunks(d).zip(ids) {
                            dt[id * d..(id + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Rope { x, base } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let s = node.value.shape();
                        let r = s.len();
                        let mut g = dy.clone();
                        rotate(&mut g, s[r - 2], s[r - 1], *base, -1.0);
                        dx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::RepeatKv { x, n_rep } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let s = node.value.shape();
                        let block = s[2] * s[3];
                        for (h, g) in dy.chunks(block).enumerate() {
                            let src = h / n_rep;
                            dx[src * block..(src + 1) * block]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Pick { x, idx } => {
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        let len = *nodes[x.0].value.shape().last().unwrap();
                        for (r, (&i, g)) in idx.iter().zip(&dy).enumerate() {
                            dx[r * len + i] += g;
                        }
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Adjoint buffer for `v`, allocated on first touch; `None` when `v` does
/// not need a gradient.
fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

/// `None` when `inner` already has the output shape, else its broadcast map.
fn expand_map(out: &[usize], inner: &[usize]) -> Option<Vec<usize>> {
    (out != inner).then(|| broadcast_map(out, inner))
}

/// Adds `f(dy)` into the adjoint of `v`, summing over broadcast axes.
fn reduce_into(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, out: &Tensor, dy: &[f64], f: impl Fn(f64) -> f64) {
    let in_shape = nodes[v.0].value.shape().to_vec();
    let Some(dx) = slot(adj, nodes, v) else { return };
    match expand_map(out.shape(), &in_shape) {
        None => dx.iter_mut().zip(dy).for_each(|(d, &g)| *d += f(g)),
        Some(map) => {
            for (&j, &g) in map.iter().zip(dy) {
                dx[j] += f(g);
            }
        }
    }
}

fn softmax_rows_backward(dx: &mut [f64], dy: &[f64], y: &[f64], len: usize) {
    for ((d, g), row) in dx.chunks_mut(len).zip(dy.chunks(len)).zip(y.chunks(len)) {
        let s: f64 = g.iter().zip(row).map(|(a, b)| a * b).sum();
        for ((a, b), v) in d.iter_mut().zip(g).zip(row) {
            *a += v * (b - s);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Flat source index for every element of `out_shape`, given per-axis strides.
fn strided_map(out_shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// In-place rotary rotation of `[.., seq, dim]` data; `sign = -1` inverts.
fn rotate(data: &mut [f64], seq: usize, dim: usize, base: f64, sign: f64) {
    let half = dim / 2;
    let mut cos = vec![0.0; seq * half];
    let mut sin = vec![0.0; seq * half];
    for p in 0..seq {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / dim as f64);
            let angle = p as f64 * theta;
            cos[p * half + i] = angle.cos();
            sin[p * half + i] = sign * angle.sin();
        }
    }
    for (r, row) in data.chunks_mut(dim).enumerate() {
        let p = r % seq;
        for i in 0..half {
            let (c, s) = (cos[p * half + i], sin[p * half + i]);
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}
