//! Reverse-mode differentiation over row-major matrices.
//!
//! Every tensor in the network is a `[rows, cols]` matrix: token grids are
//! `[tokens, channels]`, voxel grids `[voxels, channels]`. Nodes are
//! appended to a tape as operations run; [`Graph::backward`] walks the
//! tape once in reverse and returns one gradient buffer per parameter.

use std::collections::HashMap;
use std::sync::Arc;

use super::scalar::Scalar;

/// Sentinel in gather maps for "no source row" (zero padding).
pub const GATHER_NONE: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter {name} has wrong length");
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Subset of entries whose names start with `prefix`, in order.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.insert(&e.name, e.rows, e.cols, e.data.clone());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| vec![T::zero(); e.data.len()]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Vec<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        map: Arc<Vec<u32>>,
        block: usize,
    },
    Reshape(Var),
    SegLoss {
        logits: Var,
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Strided view of `op(X)` for a row-major `X`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> View<'a, T> {
    fn of(data: &'a [T], rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            View {
                data,
                rows: cols,
                cols: rows,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            View {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

fn gemm_into<T: Scalar>(a: View<T>, b: View<T>, c: &mut [T], rsc: isize, csc: isize, beta: T) {
    debug_assert_eq!(a.cols, b.rows);
    T::gemm(
        a.rows, a.cols, b.cols, a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, c, rsc, csc,
    );
}

/// Weights of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
    /// Additive smoothing in the soft-Dice ratio.
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 1.0,
            ce: 1.0,
            smooth: 1.0,
        }
    }
}

/// Soft-Dice plus mean binary cross-entropy on logits, with d(loss)/d(logit).
pub fn seg_loss_and_grad<T: Scalar>(logits: &[T], target: &[bool], w: LossWeights) -> (f64, Vec<T>) {
    let n = logits.len() as f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut gsum = 0.0f64;
    let mut bce = 0.0f64;
    let probs: Vec<f64> = logits
        .iter()
        .zip(target)
        .map(|(&z, &g)| {
            let z = z.f64();
            let g = g as u8 as f64;
            let p = sigmoid(z);
            inter += p * g;
            psum += p;
            gsum += g;
            bce += z.max(0.0) - z * g + (-z.abs()).exp().ln_1p();
            p
        })
        .collect();
    let denom = psum + gsum + w.smooth;
    let numer = 2.0 * inter + w.smooth;
    let loss = w.dice * (1.0 - numer / denom) + w.ce * bce / n;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let g = g as u8 as f64;
            let dd_dp = -(2.0 * g * denom - numer) / (denom * denom);
            T::of(w.ce * (p - g) / n + w.dice * dd_dp * p * (1.0 - p))
        })
        .collect();
    (loss, grad)
}

#[inline]
fn gelu_gate<T: Scalar>(v: T) -> T {
    let u = T::of(2.0 * GELU_C) * (v + T::of(GELU_A) * v * v * v);
    T::one() / (T::one() + (-u).exp())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(i) => &self.params.entries[*i].data,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        let e = &self.params.entries[id.0];
        self.nodes.push(Node {
            rows: e.rows,
            cols: e.cols,
            value: Value::Param(id.0),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant has wrong length");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let va = View::of(self.value(a), ar, ac, ta);
        let vb = View::of(self.value(b), br, bc, tb);
        assert_eq!(
            va.cols, vb.rows,
            "matmul inner dims {}x{} @ {}x{}",
            va.rows, va.cols, vb.rows, vb.cols
        );
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![T::zero(); m * n];
        gemm_into(va, vb, &mut out, n as isize, 1, T::zero());
        let ng = self.needs(a) || self.needs(b);
        self.push(m, n, out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a) || self.needs(b);
        self.push(r, c, out, Op::Add(a, b), ng)
    }

    /// Adds a `[1, cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(r, c, out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.shape(a);
        let ng = self.needs(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    /// Normalizes each row over its columns, then applies `gamma`, `beta` (`[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let inv_c = 1.0 / c as f64;
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() * inv_c;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.f64() - mean;
                    d * d
                })
                .sum::<f64>()
                * inv_c;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = T::of(rs);
            for j in 0..c {
                let h = T::of((row[j].f64() - mean) * rs);
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Tanh-approximated GELU, evaluated as `v·σ(2u)` since
    /// `(1 + tanh u)/2 = σ(2u)`; one `exp` instead of a `tanh`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * gelu_gate(v)).collect();
        let (r, cl) = self.shape(x);
        let ng = self.needs(x);
        self.push(r, cl, out, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(x);
        self.push(r, c, out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols out of range");
        let xs = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        self.push(r, len, out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == r), "concat_cols row mismatch");
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == c), "concat_rows col mismatch");
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row gather: output row `r`, block `b` copies source row
    /// `map[r * block + b]`, or zeros for [`GATHER_NONE`].
    pub fn gather(&mut self, x: Var, map: Arc<Vec<u32>>, block: usize) -> Var {
        let (xr, c) = self.shape(x);
        assert_eq!(map.len() % block, 0);
        let rows = map.len() / block;
        let xs = self.value(x);
        let mut out = vec![T::zero(); map.len() * c];
        for (slot, &src) in map.iter().enumerate() {
            if src != GATHER_NONE {
                let s = src as usize;
                debug_assert!(s < xr);
                out[slot * c..(slot + 1) * c].copy_from_slice(&xs[s * c..(s + 1) * c]);
            }
        }
        let ng = self.needs(x);
        self.push(rows, block * c, out, Op::Gather { x, map, block }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(rows, cols, out, Op::Reshape(x), ng)
    }

    /// Scalar segmentation loss of a `[voxels, 1]` logit column.
    pub fn seg_loss(&mut self, logits: Var, target: &[bool], w: LossWeights) -> Var {
        assert_eq!(self.value(logits).len(), target.len(), "loss target size mismatch");
        let (loss, dlogits) = seg_loss_and_grad(self.value(logits), target, w);
        let ng = self.needs(logits);
        self.push(1, 1, vec![T::of(loss)], Op::SegLoss { logits, dlogits }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter,
    /// indexed like the parameter store. Unused parameters get zeros.
    pub fn backward(&self, loss: Var) -> Vec<Vec<T>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = self.params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Value::Param(p) = node.value {
                for (o, v) in out[p].iter_mut().zip(&g) {
                    *o += *v;
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let dc = View::of(g, rows, cols, false);
                if self.needs(*a) {
                    // d op(A) = dC op(B)^T
                    let bt = View::of(self.value(*b), br, bc, !tb);
                    let k = bt.cols;
                    let (rs, cs) = if *ta { (1, ac as isize) } else { (k as isize, 1) };
                    let ga = self.acc(grads, *a).unwrap();
                    gemm_into(dc, bt, ga, rs, cs, T::one());
                }
                if self.needs(*b) {
                    // d op(B) = op(A)^T dC
                    let at = View::of(self.value(*a), ar, ac, !ta);
                    let n = cols;
                    let (rs, cs) = if *tb { (1, bc as isize) } else { (n as isize, 1) };
                    let gb = self.acc(grads, *b).unwrap();
                    gemm_into(at, dc, gb, rs, cs, T::one());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        for (o, &x) in ga.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(cols) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * *s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_c = T::of(1.0 / cols as f64);
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let hr = &xhat[i * cols..(i + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            let dh = gr[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let m1 = s1 * inv_c;
                        let m2 = s2 * inv_c;
                        for j in 0..cols {
                            let dh = gr[j] * gm[j];
                            gx[i * cols + j] += rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let two_c = T::of(2.0 * GELU_C);
                let three_a = T::of(3.0 * GELU_A);
                let xs = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &v), &gv) in gx.iter_mut().zip(xs).zip(g) {
                        let s = gelu_gate(v);
                        let d = s + v * s * (T::one() - s) * two_c * (T::one() + three_a * v * v);
                        *o += gv * d;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = match &node.value {
                    Value::Owned(d) => d,
                    Value::Param(_) => unreachable!(),
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.shape(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * xc + start + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).0 * cols;
                    if let Some(gp) = self.acc(grads, p) {
                        for (o, &x) in gp.iter_mut().zip(&g[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::Gather { x, map, block } => {
                let c = cols / block;
                if let Some(gx) = self.acc(grads, *x) {
                    for (slot, &src) in map.iter().enumerate() {
                        if src != GATHER_NONE {
                            let s = src as usize;
                            let dst = &mut gx[s * c..(s + 1) * c];
                            for (o, &v) in dst.iter_mut().zip(&g[slot * c..(slot + 1) * c]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::SegLoss { logits, dlogits } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    for (o, &d) in gl.iter_mut().zip(dlogits) {
                        *o += d * g[0];
                    }
                }
            }
        }
    }
}
