//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and the backward sweep is a single reverse pass.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis of the 2-D `rows x cols` view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, axis: Axis, start: usize },
    LayerNorm { x: Var, rstd: Vec<f32> },
    SumAll(Var),
    SumRows(Var),
    Mean(Var),
    StraightThrough(Var),
    Attention { q: Var, k: Var, v: Var, spec: Box<AttentionSpec>, probs: Vec<f32> },
}

/// Layout of a packed multi-head attention call: `batch` sequences with
/// `q_len` query rows and `k_len` key rows each, stacked row-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Valid keys per sequence; later rows are padding.
    pub k_lens: Vec<usize>,
    /// Query `t` only sees keys `u <= t`.
    pub causal: bool,
}

impl AttentionSpec {
    fn visible(&self, s: usize, t: usize) -> usize {
        if self.causal {
            self.k_lens[s].min(t + 1)
        } else {
            self.k_lens[s]
        }
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
            Op::StraightThrough(_) => "straight_through",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for the trainable leaves of a tape, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(move |id| (id, &self.grads[&id]))
    }

    /// L2 norm over all gradient entries, summed in parameter order.
    pub fn global_norm(&self) -> f32 {
        self.iter().map(|(_, g)| g.sq_norm()).sum::<f32>().sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f32) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    /// Add another gradient set into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize), ctx: &'static str) -> (usize, usize) {
    let r = a.0.max(b.0);
    let c = a.1.max(b.1);
    let ok = |x: usize, full: usize| x == full || x == 1;
    assert!(
        ok(a.0, r) && ok(b.0, r) && ok(a.1, c) && ok(b.1, c),
        "{ctx}: cannot broadcast {a:?} with {b:?}"
    );
    (r, c)
}

fn out_shape(a: &Tensor, b: &Tensor, dims: (usize, usize)) -> Vec<usize> {
    let n = dims.0 * dims.1;
    if a.len() == n {
        a.shape().to_vec()
    } else if b.len() == n {
        b.shape().to_vec()
    } else {
        vec![dims.0, dims.1]
    }
}

fn binary_map(a: &Tensor, b: &Tensor, ctx: &'static str, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    let (r, c) = broadcast_dims((ra, ca), (rb, cb), ctx);
    let shape = out_shape(a, b, (r, c));
    let (ad, bd) = (a.data(), b.data());
    let data = if (ra, ca) == (rb, cb) {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for j in 0..c {
                let x = ad[ia * ca + if ca == 1 { 0 } else { j }];
                let y = bd[ib * cb + if cb == 1 { 0 } else { j }];
                out.push(f(x, y));
            }
        }
        out
    };
    Tensor::new(shape, data).expect("broadcast output shape")
}

/// Sum a `(r, c)` gradient down to a broadcast operand of dims `target`.
fn reduce_to(grad: &[f32], r: usize, c: usize, target: (usize, usize)) -> Vec<f32> {
    if target == (r, c) {
        return grad.to_vec();
    }
    let (rt, ct) = target;
    let mut out = vec![0.0; rt * ct];
    for i in 0..r {
        let it = if rt == 1 { 0 } else { i };
        for j in 0..c {
            let jt = if ct == 1 { 0 } else { j };
            out[it * ct + jt] += grad[i * c + j];
        }
    }
    out
}

/// Element-wise product of the gradient with the (broadcast) other operand.
fn mul_broadcast(grad: &[f32], r: usize, c: usize, other: &Tensor) -> Vec<f32> {
    let (ro, co) = dims2(other);
    let od = other.data();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let io = if ro == 1 { 0 } else { i };
        for j in 0..c {
            out.push(grad[i * c + j] * od[io * co + if co == 1 { 0 } else { j }]);
        }
    }
    out
}

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter value as a constant (no gradient).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes of the 2-D views.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ca) = dims2(av);
        let (rb, cb) = dims2(bv);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?} (ta={ta}, tb={tb})", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), m, k, n, ta, tb, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let c = self.scalar(s);
        self.mul(a, c)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("unary shape");
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let mut out = xv.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(xv.shape().to_vec(), out).expect("softmax shape");
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Gather rows of `table` (`V x d`) → `ids.len() x d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (v, d) = dims2(tv);
        assert!(!ids.is_empty(), "embedding lookup with no ids");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let dims: Vec<_> = parts.iter().map(|&p| dims2(self.value(p))).collect();
        let out = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                assert!(dims.iter().all(|d| d.1 == c), "concat rows: col mismatch {dims:?}");
                let r: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(r * c);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(r, c, data)
            }
            Axis::Cols => {
                let r = dims[0].0;
                assert!(dims.iter().all(|d| d.0 == r), "concat cols: row mismatch {dims:?}");
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(r, c, data)
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// `len` rows (or columns) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let out = match axis {
            Axis::Rows => {
                assert!(start + len <= r && len > 0, "slice rows {start}+{len} of {r}");
                Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())
            }
            Axis::Cols => {
                assert!(start + len <= c && len > 0, "slice cols {start}+{len} of {c}");
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&xv.row_slice(i)[start..start + len]);
                }
                Tensor::matrix(r, len, data)
            }
        };
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, axis, start }, ng)
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        let v = Tensor::new(xv.shape().to_vec(), out).expect("layer_norm shape");
        let ng = self.ng(x);
        self.push(v, Op::LayerNorm { x, rstd }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Sum over the last axis: `r x c` → `r x 1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let data = (0..r).map(|i| xv.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, 1, data), Op::SumRows(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f32>() / xv.len() as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(
            self.value(soft).shape(),
            hard.shape(),
            "straight_through shape"
        );
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Scaled dot-product attention per sequence and head, without forming
    /// the cross-sequence score matrix. `q` is `batch*q_len x d`, `k` and `v`
    /// are `batch*k_len x d`, and `d` splits evenly into heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(spec.heads > 0 && d % spec.heads == 0, "attention: {d} columns over {} heads", spec.heads);
        assert_eq!(qv.rows(), spec.batch * spec.q_len, "attention: query rows");
        assert_eq!(kv.rows(), spec.batch * spec.k_len, "attention: key rows");
        assert_eq!(dims2(kv), dims2(vv), "attention: key/value shapes");
        assert_eq!(kv.cols(), d, "attention: key width");
        assert_eq!(spec.k_lens.len(), spec.batch, "attention: key lengths");
        assert!(spec.k_lens.iter().all(|&l| l <= spec.k_len), "attention: key length beyond k_len");
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.len()];
        let mut probs = vec![0.0; spec.batch * spec.heads * spec.q_len * spec.k_len];
        for s in 0..spec.batch {
            for h in 0..spec.heads {
                let c0 = h * dh;
                for t in 0..spec.q_len {
                    let n = spec.visible(s, t);
                    if n == 0 {
                        continue;
                    }
                    let qrow = (s * spec.q_len + t) * d + c0;
                    let p0 = ((s * spec.heads + h) * spec.q_len + t) * spec.k_len;
                    let p = &mut probs[p0..p0 + n];
                    for (u, pu) in p.iter_mut().enumerate() {
                        let krow = (s * spec.k_len + u) * d + c0;
                        *pu = scale * dot(&qd[qrow..qrow + dh], &kd[krow..krow + dh]);
                    }
                    softmax_in_place(p);
                    let o = &mut out[qrow..qrow + dh];
                    for (u, &pu) in p.iter().enumerate() {
                        let vrow = (s * spec.k_len + u) * d + c0;
                        for (oj, &vj) in o.iter_mut().zip(&vd[vrow..vrow + dh]) {
                            *oj += pu * vj;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out).expect("attention shape");
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec),
                probs,
            },
            ng,
        )
    }

    fn op_label(&self, i: usize) -> String {
        format!("{}#{}", self.nodes[i].op.name(), i)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable leaf reachable from the loss; the tape is not modified.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                context: "backward: loss must be scalar",
                expected: vec![1],
                actual: lv.shape().to_vec(),
            });
        }
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            if node.needs_grad && !node.value.is_finite() {
                return Err(Error::Numerical {
                    op: self.op_label(i),
                    detail: "non-finite forward value".into(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    op: self.op_label(i),
                    detail: "non-finite gradient".into(),
                });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    out.insert(id, Tensor::new(shape, g).expect("grad shape"));
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ra, ca) = dims2(av);
                let (rb, cb) = dims2(bv);
                let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
                let n = if tb { rb } else { cb };
                if self.ng(a) {
                    let mut da = vec![0.0; m * k];
                    match (ta, tb) {
                        (false, false) => gemm_acc(g, bv.data(), m, n, k, false, true, &mut da),
                        (false, true) => gemm_acc(g, bv.data(), m, n, k, false, false, &mut da),
                        (true, false) => gemm_acc(bv.data(), g, k, n, m, false, true, &mut da),
                        (true, true) => gemm_acc(bv.data(), g, k, n, m, true, true, &mut da),
                    }
                    acc(a, da);
                }
                if self.ng(b) {
                    let mut db = vec![0.0; k * n];
                    match (ta, tb) {
                        (false, false) => gemm_acc(av.data(), g, k, m, n, true, false, &mut db),
                        (true, false) => gemm_acc(av.data(), g, k, m, n, false, false, &mut db),
                        (false, true) => gemm_acc(g, av.data(), n, m, k, true, false, &mut db),
                        (true, true) => gemm_acc(g, av.data(), n, m, k, true, true, &mut db),
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let (r, c) = dims2(out);
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(a) {
                    acc(a, reduce_to(g, r, c, dims2(self.value(a))));
                }
                if self.ng(b) {
                    let mut db = reduce_to(g, r, c, dims2(self.value(b)));
                    if sign < 0.0 {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(b, db);
                }
            }
            &Op::Mul(a, b) => {
                let (r, c) = dims2(out);
                if self.ng(a) {
                    let full = mul_broadcast(g, r, c, self.value(b));
                    acc(a, reduce_to(&full, r, c, dims2(self.value(a))));
                }
                if self.ng(b) {
                    let full = mul_broadcast(g, r, c, self.value(a));
                    acc(b, reduce_to(&full, r, c, dims2(self.value(b))));
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                acc(x, g.iter().zip(xv).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
            }
            &Op::Tanh(x) => {
                acc(x, g.iter().zip(out.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect());
            }
            &Op::Sigmoid(x) => {
                acc(x, g.iter().zip(out.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect());
            }
            &Op::Log(x) => {
                let xv = self.value(x).data();
                acc(x, g.iter().zip(xv).map(|(&g, &x)| g / x).collect());
            }
            &Op::Exp(x) => {
                acc(x, g.iter().zip(out.data()).map(|(&g, &y)| g * y).collect());
            }
            &Op::Softmax(x) => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dotp: f32 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = ys[j] * (gs[j] - dotp);
                    }
                }
                acc(x, dx);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = dims2(self.value(*table));
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for (t, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                        *t += gv;
                    }
                }
                acc(*table, dt);
            }
            Op::Concat { parts, axis } => {
                let (r, c) = dims2(out);
                match axis {
                    Axis::Rows => {
                        let mut off = 0;
                        for &p in parts {
                            let n = self.value(p).len();
                            if self.ng(p) {
                                acc(p, g[off..off + n].to_vec());
                            }
                            off += n;
                        }
                    }
                    Axis::Cols => {
                        let mut col = 0;
                        for &p in parts {
                            let pc = self.value(p).cols();
                            if self.ng(p) {
                                let mut dp = Vec::with_capacity(r * pc);
                                for i in 0..r {
                                    dp.extend_from_slice(&g[i * c + col..i * c + col + pc]);
                                }
                                acc(p, dp);
                            }
                            col += pc;
                        }
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let (r, c) = dims2(self.value(x));
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        dx[start * c..start * c + g.len()].copy_from_slice(g);
                    }
                    Axis::Cols => {
                        let len = out.cols();
                        for i in 0..r {
                            dx[i * c + start..i * c + start + len]
                                .copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, rstd } => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let mg = gs.iter().sum::<f32>() / c as f32;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for j in 0..c {
                        dx[i * c + j] = rstd[i] * (gs[j] - mg - ys[j] * mgy);
                    }
                }
                acc(*x, dx);
            }
            &Op::SumAll(x) => {
                acc(x, vec![g[0]; self.value(x).len()]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                acc(x, vec![g[0] / n as f32; n]);
            }
            &Op::SumRows(x) => {
                let (r, c) = dims2(self.value(x));
                let mut dx = Vec::with_capacity(r * c);
                for &gi in g.iter().take(r) {
                    dx.extend(std::iter::repeat(gi).take(c));
                }
                acc(x, dx);
            }
            &Op::StraightThrough(soft) => {
                acc(soft, g.to_vec());
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = self.value(*q).cols();
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut ds = vec![0.0; spec.k_len];
                for s in 0..spec.batch {
                    for h in 0..spec.heads {
                        let c0 = h * dh;
                        for t in 0..spec.q_len {
                            let n = spec.visible(s, t);
                            let qrow = (s * spec.q_len + t) * d + c0;
                            let p0 = ((s * spec.heads + h) * spec.q_len + t) * spec.k_len;
                            let p = &probs[p0..p0 + n];
                            let go = &g[qrow..qrow + dh];
                            let mut pdp = 0.0;
                            for (u, &pu) in p.iter().enumerate() {
                                let vrow = (s * spec.k_len + u) * d + c0;
                                let dp = dot(go, &vd[vrow..vrow + dh]);
                                ds[u] = dp;
                                pdp += pu * dp;
                                for (dvj, &gj) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                    *dvj += pu * gj;
                                }
                            }
                            for (u, &pu) in p.iter().enumerate() {
                                let w = scale * pu * (ds[u] - pdp);
                                let krow = (s * spec.k_len + u) * d + c0;
                                for j in 0..dh {
                                    dq[qrow + j] += w * kd[krow + j];
                                    dk[krow + j] += w * qd[qrow + j];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Same attention built from primitives with a dense additive mask.
    fn composed_attention(t: &mut Tape, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Var {
        let d = t.value(q).cols();
        let dh = d / spec.heads;
        let (nq, nk) = (spec.batch * spec.q_len, spec.batch * spec.k_len);
        let mut m = vec![-1e9f32; nq * nk];
        for s in 0..spec.batch {
            for i in 0..spec.q_len {
                for u in 0..spec.visible(s, i) {
                    m[(s * spec.q_len + i) * nk + s * spec.k_len + u] = 0.0;
                }
            }
        }
        let mask = t.constant(Tensor::matrix(nq, nk, m));
        let heads: Vec<Var> = (0..spec.heads)
            .map(|h| {
                let qh = t.slice(q, Axis::Cols, h * dh, dh);
                let kh = t.slice(k, Axis::Cols, h * dh, dh);
                let vh = t.slice(v, Axis::Cols, h * dh, dh);
                let sc = t.matmul_t(qh, kh, false, true);
                let sc = t.scale(sc, 1.0 / (dh as f32).sqrt());
                let sc = t.add(sc, mask);
                let p = t.softmax(sc);
                t.matmul(p, vh)
            })
            .collect();
        t.concat(&heads, Axis::Cols)
    }

    #[test]
    fn fused_attention_matches_composition() {
        let mut rng = Rng::new(4);
        for causal in [false, true] {
            let spec = AttentionSpec {
                heads: 2,
                batch: 3,
                q_len: 4,
                k_len: 4,
                k_lens: vec![4, 2, 3],
                causal,
            };
            let mut store = ParamStore::new();
            let q = store.add_normal("q", &[12, 6], 1.0, &mut rng);
            let k = store.add_normal("k", &[12, 6], 1.0, &mut rng);
            let v = store.add_normal("v", &[12, 6], 1.0, &mut rng);
            let w = Tensor::new(vec![12, 6], (0..72).map(|_| rng.normal()).collect()).unwrap();
            let run = |fused: bool| {
                let mut t = Tape::new();
                let (qv, kv, vv) = (t.param(&store, q), t.param(&store, k), t.param(&store, v));
                let o = if fused {
                    t.attention(qv, kv, vv, spec.clone())
                } else {
                    composed_attention(&mut t, qv, kv, vv, &spec)
                };
                let wv = t.constant(w.clone());
                let l = t.mul(o, wv);
                let l = t.sum(l);
                let out = t.value(o).data().to_vec();
                (out, t.backward(l).unwrap())
            };
            let (fo, fg) = run(true);
            let (co, cg) = run(false);
            for (a, b) in fo.iter().zip(&co) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
            for id in [q, k, v] {
                for (a, b) in fg.get(id).unwrap().data().iter().zip(cg.get(id).unwrap().data()) {
                    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let y = t.mul(xv, xv);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap());
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let s = t.sum(xv);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.shape(), &[2, 3, 4]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        assert!(matches!(t.backward(xv), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let c = store.add("c", Tensor::scalar(5.0));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let cv = t.frozen_param(&store, c);
        let y = t.mul(xv, cv);
        let g = t.backward(y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn nan_names_offending_op() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(-1.0));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let l = t.log(xv);
        let s = t.sum(l);
        match t.backward(s) {
            Err(Error::Numerical { op, .. }) => assert!(op.starts_with("log#"), "{op}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn backward_leaves_tape_reusable() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.5));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let y = t.tanh(xv);
        let n = t.len();
        let g1 = t.backward(y).unwrap();
        let g2 = t.backward(y).unwrap();
        assert_eq!(t.len(), n);
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![0.2, 0.8]));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let s = t.softmax(xv);
        let st = t.straight_through(s, Tensor::one_hot(2, 1));
        assert_eq!(t.value(st).data(), &[0.0, 1.0]);
        let w = t.constant(Tensor::row(vec![1.0, 0.0]));
        let p = t.mul(st, w);
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        // d softmax_0 / dx = s0 (1 - s0), -s0 s1
        let sv = t.value(s).data().to_vec();
        let gx = g.get(x).unwrap().data();
        assert!((gx[0] - sv[0] * (1.0 - sv[0])).abs() < 1e-6);
        assert!((gx[1] + sv[0] * sv[1]).abs() < 1e-6);
    }
}
