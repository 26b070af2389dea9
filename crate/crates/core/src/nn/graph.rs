//! Reverse-mode differentiation over a static per-call graph.
//!
//! A [`Graph`] is built by calling its operation methods; every call appends a
//! node holding the forward value. [`Graph::backward`] walks the nodes in
//! reverse and returns the gradient of a scalar node with respect to every
//! node it depends on. Shapes are checked with assertions: layers validate
//! user-facing inputs before they reach the graph.

use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::tensor::{sigmoid, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MaskRows(Var, Vec<bool>),
    SelectRows(Var, Var, Vec<bool>),
    PairBroadcast(Var, Var),
    LayerNorm(Var, Vec<f64>),
    GroupMax(Var, Vec<Option<usize>>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    keys: usize,
    shared: bool,
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients of one scalar with respect to the nodes of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("graph op produced inconsistent shape")
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated requests reuse the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let key = (store.id(), id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(key, v);
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (u64, usize, Var)> + '_ {
        self.params.iter().map(|(&(s, i), &v)| (s, i, v))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("unary shape");
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        assert_eq!(ta.len(), tb.len(), "elementwise op on mismatched sizes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("binary shape");
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner extents differ");
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        self.push(mat(n, m, out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a[r, c] + b[c]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.dims(a);
        let bv = self.nodes[b.0].value.data();
        assert_eq!(bv.len(), m, "row broadcast width");
        let av = self.nodes[a.0].value.data();
        let out = (0..n * m).map(|i| av[i] + bv[i % m]).collect();
        self.push(mat(n, m, out), Op::AddRow(a, b))
    }

    /// `a[r, c] * b[c]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.dims(a);
        let bv = self.nodes[b.0].value.data();
        assert_eq!(bv.len(), m, "row broadcast width");
        let av = self.nodes[a.0].value.data();
        let out = (0..n * m).map(|i| av[i] * bv[i % m]).collect();
        self.push(mat(n, m, out), Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "concat_cols row counts differ");
                c
            })
            .collect();
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.nodes[p.0].value.data();
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        self.push(mat(n, m, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.dims(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.dims(p).1, m, "concat_rows widths differ");
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let n = out.len() / m.max(1);
        self.push(mat(n, m, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims(a);
        assert!(start + len <= n, "slice_rows out of range");
        let d = &self.nodes[a.0].value.data()[start * m..(start + len) * m];
        let value = mat(len, m, d.to_vec());
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims(a);
        assert!(start + len <= m, "slice_cols out of range");
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&d[r * m + start..r * m + start + len]);
        }
        self.push(mat(n, len, out), Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let (n, m) = self.dims(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            assert!(i < n, "gather_rows index out of range");
            out.extend_from_slice(&d[i * m..(i + 1) * m]);
        }
        self.push(mat(index.len(), m, out), Op::GatherRows(a, index.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let d = self.nodes[a.0].value.data().to_vec();
        assert_eq!(d.len(), rows * cols, "reshape size");
        self.push(mat(rows, cols, d), Op::Reshape(a))
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let (n, m) = self.dims(a);
        assert_eq!(mask.len(), n, "mask length");
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            if mask[r] {
                out[r * m..(r + 1) * m].copy_from_slice(&d[r * m..(r + 1) * m]);
            }
        }
        self.push(mat(n, m, out), Op::MaskRows(a, mask.to_vec()))
    }

    /// Row `r` from `a` where `mask[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, mask: &[bool]) -> Var {
        let (n, m) = self.dims(a);
        assert_eq!(self.dims(b), (n, m), "select_rows shapes");
        assert_eq!(mask.len(), n, "mask length");
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let src = if mask[r] { da } else { db };
            out.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        self.push(mat(n, m, out), Op::SelectRows(a, b, mask.to_vec()))
    }

    /// For `x` of shape `n × d` and `e` of shape `(n·n) × d`, returns rows
    /// `x[j] + e[i·n + j]` in `(i, j)` order.
    pub fn pair_broadcast(&mut self, x: Var, e: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.dims(e), (n * n, m), "pair_broadcast shapes");
        let dx = self.nodes[x.0].value.data();
        let de = self.nodes[e.0].value.data();
        let mut out = Vec::with_capacity(n * n * m);
        for i in 0..n {
            for j in 0..n {
                let base = (i * n + j) * m;
                out.extend((0..m).map(|c| dx[j * m + c] + de[base + c]));
            }
        }
        self.push(mat(n * n, m, out), Op::PairBroadcast(x, e))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.dims(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        let mut inv = Vec::with_capacity(n);
        for r in 0..n {
            let row = &d[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv.push(s);
            out.extend(row.iter().map(|x| (x - mean) * s));
        }
        self.push(mat(n, m, out), Op::LayerNorm(a, inv))
    }

    /// Column-wise max over consecutive groups of `group` rows, ignoring rows
    /// whose mask entry is false. A group with no valid row yields zeros.
    pub fn group_max(&mut self, a: Var, group: usize, mask: &[bool]) -> Var {
        let (n, m) = self.dims(a);
        assert!(group > 0 && n % group == 0, "group_max row count");
        assert_eq!(mask.len(), n, "mask length");
        let groups = n / group;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; groups * m];
        let mut arg = vec![None; groups * m];
        for g in 0..groups {
            for c in 0..m {
                let mut best: Option<(usize, f64)> = None;
                for r in g * group..(g + 1) * group {
                    if !mask[r] {
                        continue;
                    }
                    let x = d[r * m + c];
                    if best.is_none_or(|(_, b)| x > b) {
                        best = Some((r, x));
                    }
                }
                if let Some((r, x)) = best {
                    out[g * m + c] = x;
                    arg[g * m + c] = Some(r);
                }
            }
        }
        self.push(mat(groups, m, out), Op::GroupMax(a, arg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            out.extend(super::tensor::softmax(&d[r * m..(r + 1) * m]));
        }
        self.push(mat(n, m, out), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = &d[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push(mat(n, m, out), Op::LogSoftmaxRows(a))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `nq × d`. Keys and values are either shared (`nk × d`) or given
    /// per query (`(nq·nk) × d`, query-major). `key_mask[j] == false` gives key
    /// `j` zero weight; a query with no valid key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Var {
        let (nq, d) = self.dims(q);
        let nk = key_mask.len();
        let (kr, kc) = self.dims(k);
        assert_eq!(self.dims(v), (kr, kc), "keys and values differ in shape");
        assert_eq!(kc, d, "key width");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let shared = if kr == nk {
            true
        } else {
            assert_eq!(kr, nq * nk, "key rows must be nk or nq*nk");
            false
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![0.0; nq * d];
        let mut weights = vec![0.0; nq * heads * nk];
        let valid: Vec<usize> = (0..nk).filter(|&j| key_mask[j]).collect();
        let mut scores = vec![0.0; nk];
        for i in 0..nq {
            if valid.is_empty() {
                continue;
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for &j in &valid {
                    let row = if shared { j } else { i * nk + j };
                    let s: f64 = cols.clone().map(|c| qv[i * d + c] * kv[row * d + c]).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for &j in &valid {
                    let e = (scores[j] - max).exp();
                    scores[j] = e;
                    total += e;
                }
                let wbase = (i * heads + h) * nk;
                for &j in &valid {
                    let w = scores[j] / total;
                    weights[wbase + j] = w;
                    let row = if shared { j } else { i * nk + j };
                    for c in cols.clone() {
                        out[i * d + c] += w * vv[row * d + c];
                    }
                }
            }
        }
        let cache = AttentionCache { q, k, v, heads, keys: nk, shared, weights };
        self.push(mat(nq, d, out), Op::Attention(Box::new(cache)))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                let av = val(*a);
                let bv = val(*b);
                {
                    let ga = slot(grads, *a, n * k);
                    for i in 0..n {
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let dyr = &dy[i * m..(i + 1) * m];
                            ga[i * k + p] += dyr.iter().zip(brow).map(|(x, w)| x * w).sum::<f64>();
                        }
                    }
                }
                let gb = slot(grads, *b, k * m);
                for i in 0..n {
                    let dyr = &dy[i * m..(i + 1) * m];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let grow = &mut gb[p * m..(p + 1) * m];
                        for (g, d) in grow.iter_mut().zip(dyr) {
                            *g += x * d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, dy.len()), dy.iter().copied());
                add_into(slot(grads, *b, dy.len()), dy.iter().copied());
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, dy.len()), dy.iter().copied());
                add_into(slot(grads, *b, dy.len()), dy.iter().map(|d| -d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(bv).map(|(d, x)| d * x));
                add_into(slot(grads, *b, dy.len()), dy.iter().zip(av).map(|(d, x)| d * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(bv).map(|(d, x)| d / x));
                add_into(
                    slot(grads, *b, dy.len()),
                    dy.iter().zip(av.iter().zip(bv)).map(|(d, (x, z))| -d * x / (z * z)),
                );
            }
            Op::AddRow(a, b) => {
                let m = node.value.cols();
                add_into(slot(grads, *a, dy.len()), dy.iter().copied());
                let gb = slot(grads, *b, m);
                for (i, d) in dy.iter().enumerate() {
                    gb[i % m] += d;
                }
            }
            Op::MulRow(a, b) => {
                let m = node.value.cols();
                let (av, bv) = (val(*a), val(*b));
                add_into(slot(grads, *a, dy.len()), dy.iter().enumerate().map(|(i, d)| d * bv[i % m]));
                let gb = slot(grads, *b, m);
                for (i, d) in dy.iter().enumerate() {
                    gb[i % m] += d * av[i];
                }
            }
            Op::Scale(a, s) => add_into(slot(grads, *a, dy.len()), dy.iter().map(|d| d * s)),
            Op::AddScalar(a) => add_into(slot(grads, *a, dy.len()), dy.iter().copied()),
            Op::Sigmoid(a) => add_into(slot(grads, *a, dy.len()), dy.iter().zip(y).map(|(d, s)| d * s * (1.0 - s))),
            Op::Tanh(a) => add_into(slot(grads, *a, dy.len()), dy.iter().zip(y).map(|(d, t)| d * (1.0 - t * t))),
            Op::Relu(a) => {
                let av = val(*a);
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(av).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }))
            }
            Op::Softplus(a) => {
                let av = val(*a);
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(av).map(|(d, x)| d * sigmoid(*x)))
            }
            Op::Exp(a) => add_into(slot(grads, *a, dy.len()), dy.iter().zip(y).map(|(d, e)| d * e)),
            Op::Ln(a) => {
                let av = val(*a);
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(av).map(|(d, x)| d / x))
            }
            Op::Square(a) => {
                let av = val(*a);
                add_into(slot(grads, *a, dy.len()), dy.iter().zip(av).map(|(d, x)| 2.0 * d * x))
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                add_into(slot(grads, *a, n), std::iter::repeat_n(dy[0], n));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let g = dy[0] / n.max(1) as f64;
                add_into(slot(grads, *a, n), std::iter::repeat_n(g, n));
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let m = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    let gp = slot(grads, *p, n * w);
                    for r in 0..n {
                        for c in 0..w {
                            gp[r * w + c] += dy[r * m + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    add_into(slot(grads, *p, len), dy[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for (i, d) in dy.iter().enumerate() {
                    ga[start * m + i] += d;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(*a);
                let len = node.value.cols();
                let ga = slot(grads, *a, n * m);
                for r in 0..n {
                    for c in 0..len {
                        ga[r * m + start + c] += dy[r * len + c];
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..m {
                        ga[i * m + c] += dy[k * m + c];
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, dy.len()), dy.iter().copied()),
            Op::MaskRows(a, mask) => {
                let m = node.value.cols();
                add_into(
                    slot(grads, *a, dy.len()),
                    dy.iter().enumerate().map(|(i, d)| if mask[i / m] { *d } else { 0.0 }),
                );
            }
            Op::SelectRows(a, b, mask) => {
                let m = node.value.cols();
                add_into(
                    slot(grads, *a, dy.len()),
                    dy.iter().enumerate().map(|(i, d)| if mask[i / m] { *d } else { 0.0 }),
                );
                add_into(
                    slot(grads, *b, dy.len()),
                    dy.iter().enumerate().map(|(i, d)| if mask[i / m] { 0.0 } else { *d }),
                );
            }
            Op::PairBroadcast(x, e) => {
                let (n, m) = self.dims(*x);
                add_into(slot(grads, *e, dy.len()), dy.iter().copied());
                let gx = slot(grads, *x, n * m);
                for i in 0..n {
                    for j in 0..n {
                        let base = (i * n + j) * m;
                        for c in 0..m {
                            gx[j * m + c] += dy[base + c];
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for r in 0..n {
                    let dyr = &dy[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let mean_dy = dyr.iter().sum::<f64>() / m as f64;
                    let mean_dyy = dyr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / m as f64;
                    for c in 0..m {
                        ga[r * m + c] += inv[r] * (dyr[c] - mean_dy - yr[c] * mean_dyy);
                    }
                }
            }
            Op::GroupMax(a, arg) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for (k, src) in arg.iter().enumerate() {
                    if let Some(r) = src {
                        ga[r * m + k % m] += dy[k];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for r in 0..n {
                    let dyr = &dy[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let dot: f64 = dyr.iter().zip(yr).map(|(d, v)| d * v).sum();
                    for c in 0..m {
                        ga[r * m + c] += yr[c] * (dyr[c] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (n, m) = self.dims(*a);
                let ga = slot(grads, *a, n * m);
                for r in 0..n {
                    let dyr = &dy[r * m..(r + 1) * m];
                    let total: f64 = dyr.iter().sum();
                    for c in 0..m {
                        ga[r * m + c] += dyr[c] - y[r * m + c].exp() * total;
                    }
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, dy, grads),
        }
    }

    fn attention_backward(&self, cache: &AttentionCache, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (nq, d) = self.dims(cache.q);
        let nk = cache.keys;
        let heads = cache.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[cache.q.0].value.data();
        let kv = self.nodes[cache.k.0].value.data();
        let vv = self.nodes[cache.v.0].value.data();
        let krows = self.nodes[cache.k.0].value.rows();
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; krows * d];
        let mut gv = vec![0.0; krows * d];
        let mut dw = vec![0.0; nk];
        for i in 0..nq {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let wbase = (i * heads + h) * nk;
                let w = &cache.weights[wbase..wbase + nk];
                let mut dot = 0.0;
                for j in 0..nk {
                    if w[j] == 0.0 {
                        dw[j] = 0.0;
                        continue;
                    }
                    let row = if cache.shared { j } else { i * nk + j };
                    let mut s = 0.0;
                    for c in cols.clone() {
                        s += dy[i * d + c] * vv[row * d + c];
                        gv[row * d + c] += w[j] * dy[i * d + c];
                    }
                    dw[j] = s;
                    dot += w[j] * s;
                }
                for j in 0..nk {
                    if w[j] == 0.0 {
                        continue;
                    }
                    let ds = w[j] * (dw[j] - dot) * scale;
                    let row = if cache.shared { j } else { i * nk + j };
                    for c in cols.clone() {
                        gq[i * d + c] += ds * kv[row * d + c];
                        gk[row * d + c] += ds * qv[i * d + c];
                    }
                }
            }
        }
        add_into(slot(grads, cache.q, nq * d), gq);
        add_into(slot(grads, cache.k, krows * d), gk);
        add_into(slot(grads, cache.v, krows * d), gv);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
