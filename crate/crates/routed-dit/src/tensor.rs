//! Define-by-run reverse-mode autodiff tape.
//!
//! A `Tape` records every operation of a forward pass; `backward` replays the
//! records in reverse and accumulates gradients into the leaves. Tapes are
//! rebuilt per training step; there is no graph caching. All storage is
//! row-major `f64`.

use crate::error::{Error, Result};
use ndarray::ArrayView2;

const LN_EPS: f64 = 1e-12;
// Keep sigmoid strictly inside (0, 1) even for saturating inputs.
const SIG_LO: f64 = 1e-300;
const SIG_HI: f64 = 1.0 - 1e-16;

/// Handle to a tensor recorded on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScaleConst { a: usize, c: f64 },
    AddConst { a: usize },
    /// Multiply every element of `a` by the 1-element tensor `s`.
    MulScalar { a: usize, s: usize },
    /// Add the 1-element tensor `s` to every element of `a`.
    AddScalar { a: usize, s: usize },
    /// Scale row i of `a` by element i of `s`.
    ScaleRows { a: usize, s: usize },
    AddRowVec { a: usize, v: usize },
    MulRowVec { a: usize, v: usize },
    SliceCols { a: usize, start: usize, len: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    SoftmaxLastDim { a: usize },
    LayerNormLastDim { a: usize },
    MseMean { a: usize, b: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { base: usize, rows: usize, idx: Vec<usize> },
    /// Fused multi-head self-attention over already-projected Q, K, V.
    /// Saves the per-head softmax probabilities for the backward pass.
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul_elementwise",
        Op::ScaleConst { .. } => "scale_by_scalar",
        Op::AddConst { .. } => "add_const",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddScalar { .. } => "add_scalar",
        Op::ScaleRows { .. } => "scale_rows",
        Op::AddRowVec { .. } => "add_row_vec",
        Op::MulRowVec { .. } => "mul_row_vec",
        Op::SliceCols { .. } => "slice_cols",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Gelu { .. } => "gelu",
        Op::SoftmaxLastDim { .. } => "softmax_lastdim",
        Op::LayerNormLastDim { .. } => "layernorm_lastdim",
        Op::MseMean { .. } => "mse_mean",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows_into",
        Op::Attention { .. } => "attention",
    }
}

struct Node {
    op: Op,
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Row-major result regardless of input strides; `dot` on transposed views
// can hand back a column-major array.
fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let out = a.dot(&b);
    match out.as_slice() {
        Some(s) => s.to_vec(),
        None => out.iter().copied().collect(),
    }
}

fn view<'a>(data: &'a [f64], r: usize, c: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((r, c), data).expect("internal shape invariant")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, data, shape, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length must match shape product"
        );
        self.push(Op::Leaf, data, shape, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64, requires_grad: bool) -> Var {
        self.leaf(vec![v], vec![1], requires_grad)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                let last = *s.last().unwrap();
                (s.iter().product::<usize>() / last, last)
            }
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Linear ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(view(self.data(a), m, k), view(self.data(b), k, n));
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, out, vec![m, n], rg))
    }

    fn elementwise(&mut self, op_tag: &'static str, a: Var, b: Var) -> Result<(Vec<f64>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_tag,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok((Vec::with_capacity(self.data(a).len()), self.rg(&[a.0, b.0])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, rg) = self.elementwise("add", a, b)?;
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y));
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, shape, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, rg) = self.elementwise("sub", a, b)?;
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y));
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, out, shape, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, rg) = self.elementwise("mul_elementwise", a, b)?;
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y));
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out, shape, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Op::ScaleConst { a: a.0, c }, out, shape, rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Op::AddConst { a: a.0 }, out, shape, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.data(s).len() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, s.0]);
        Ok(self.push(Op::MulScalar { a: a.0, s: s.0 }, out, shape, rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.data(s).len() != 1 {
            return Err(Error::Shape {
                op: "add_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(a).iter().map(|x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, s.0]);
        Ok(self.push(Op::AddScalar { a: a.0, s: s.0 }, out, shape, rg))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.data(s).len() != r {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let sv = self.data(s)[i];
            out.extend(self.data(a)[i * c..(i + 1) * c].iter().map(|x| x * sv));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, s.0]);
        Ok(self.push(Op::ScaleRows { a: a.0, s: s.0 }, out, shape, rg))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.data(v).len() != c {
            return Err(Error::Shape {
                op: "add_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(
                self.data(a)[i * c..(i + 1) * c]
                    .iter()
                    .zip(self.data(v))
                    .map(|(x, y)| x + y),
            );
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, v.0]);
        Ok(self.push(Op::AddRowVec { a: a.0, v: v.0 }, out, shape, rg))
    }

    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.data(v).len() != c {
            return Err(Error::Shape {
                op: "mul_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(
                self.data(a)[i * c..(i + 1) * c]
                    .iter()
                    .zip(self.data(v))
                    .map(|(x, y)| x * y),
            );
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, v.0]);
        Ok(self.push(Op::MulRowVec { a: a.0, v: v.0 }, out, shape, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if start + len > c {
            return Err(Error::Arg(format!(
                "slice_cols [{start}, {}) out of range for {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data(a)[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::SliceCols { a: a.0, start, len }, out, vec![r, len], rg))
    }

    // ── Nonlinear ops ────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                s.clamp(SIG_LO, SIG_HI)
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Op::Sigmoid { a: a.0 }, out, shape, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Op::Gelu { a: a.0 }, out, shape, rg)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if c == 0 {
            return Err(Error::Dim("softmax over an empty last dimension".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.data(a)[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::SoftmaxLastDim { a: a.0 }, out, shape, rg))
    }

    pub fn layernorm_lastdim(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if c < 2 {
            return Err(Error::Dim(format!(
                "layernorm needs last dimension >= 2, got {c}"
            )));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.data(a)[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::LayerNormLastDim { a: a.0 }, out, shape, rg))
    }

    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mse_mean",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Dim("mse_mean over empty tensors".into()));
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MseMean { a: a.0, b: b.0 }, vec![s / n as f64], vec![1], rg))
    }

    // ── Index ops ────────────────────────────────────────────────────

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, rows: r });
            }
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.data(a)[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::GatherRows { a: a.0, idx: idx.to_vec() }, out, vec![idx.len(), c], rg))
    }

    /// Copy of `base` with row `idx[j]` replaced by row j of `rows`.
    pub fn scatter_rows_into(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(base);
        let (rr, rc) = self.rows_cols(rows);
        if rc != c || rr != idx.len() {
            return Err(Error::Shape {
                op: "scatter_rows_into",
                lhs: self.shape(base).to_vec(),
                rhs: self.shape(rows).to_vec(),
            });
        }
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, rows: r });
            }
        }
        let mut out = self.data(base).to_vec();
        for (j, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&self.data(rows)[j * c..(j + 1) * c]);
        }
        let shape = self.shape(base).to_vec();
        let rg = self.rg(&[base.0, rows.0]);
        Ok(self.push(Op::ScatterRows { base: base.0, rows: rows.0, idx: idx.to_vec() }, out, shape, rg))
    }

    // ── Attention ────────────────────────────────────────────────────

    /// Multi-head self-attention over projected Q, K, V (each n x d).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Arg(format!("heads {heads} must divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * n];
        for h in 0..heads {
            let qh = gather_cols(self.data(q), n, d, h * dh, dh);
            let kh = gather_cols(self.data(k), n, d, h * dh, dh);
            let vh = gather_cols(self.data(v), n, d, h * dh, dh);
            let mut scores = mm(view(&qh, n, dh), view(&kh, n, dh).t());
            scores.iter_mut().for_each(|x| *x *= scale);
            let s = &scores[..];
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let row = &s[i * n..(i + 1) * n];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..n {
                    p[i * n + j] = exps[j] / z;
                }
            }
            let oh = mm(view(p, n, n), view(&vh, n, dh));
            scatter_cols(&mut out, n, d, h * dh, dh, &oh);
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs },
            out,
            vec![n, d],
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Find the first node whose output holds a non-finite value.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|x| !x.is_finite()))
            .map(|(i, n)| (i, op_name(&n.op)))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Arg(
                "backward already called on this tape; build a fresh tape".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, contrib: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].data.len();
        let slot = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; n]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn acc_at(&mut self, target: usize, offset: usize, contrib: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].data.len();
        let slot = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; n]);
        for (s, c) in slot[offset..offset + contrib.len()].iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // `g` is dLoss/dOutput of node i; distribute to its inputs.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = &self.nodes[a].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b].shape[1];
                let da = mm(view(g, m, n), view(&self.nodes[b].data, k, n).t());
                let db = mm(view(&self.nodes[a].data, m, k).t(), view(g, m, n));
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(&self.nodes[b].data).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[a].data).map(|(x, y)| x * y).collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::ScaleConst { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.acc(a, &da);
            }
            Op::AddConst { a } => {
                let a = *a;
                self.acc(a, g);
            }
            Op::MulScalar { a, s } => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].data[0];
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                let ds: f64 = g.iter().zip(&self.nodes[a].data).map(|(x, y)| x * y).sum();
                self.acc(a, &da);
                self.acc(s, &[ds]);
            }
            Op::AddScalar { a, s } => {
                let (a, s) = (*a, *s);
                self.acc(a, g);
                let ds: f64 = g.iter().sum();
                self.acc(s, &[ds]);
            }
            Op::ScaleRows { a, s } => {
                let (a, s) = (*a, *s);
                let r = self.nodes[s].data.len();
                let c = self.nodes[a].data.len() / r;
                let mut da = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for row in 0..r {
                    let sv = self.nodes[s].data[row];
                    for col in 0..c {
                        let j = row * c + col;
                        da[j] = g[j] * sv;
                        ds[row] += g[j] * self.nodes[a].data[j];
                    }
                }
                self.acc(a, &da);
                self.acc(s, &ds);
            }
            Op::AddRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = self.nodes[v].data.len();
                let r = self.nodes[a].data.len() / c;
                self.acc(a, g);
                let mut dv = vec![0.0; c];
                for row in 0..r {
                    for col in 0..c {
                        dv[col] += g[row * c + col];
                    }
                }
                self.acc(v, &dv);
            }
            Op::MulRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = self.nodes[v].data.len();
                let r = self.nodes[a].data.len() / c;
                let mut da = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for row in 0..r {
                    for col in 0..c {
                        let j = row * c + col;
                        da[j] = g[j] * self.nodes[v].data[col];
                        dv[col] += g[j] * self.nodes[a].data[j];
                    }
                }
                self.acc(a, &da);
                self.acc(v, &dv);
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (_, c) = {
                    let s = &self.nodes[a].shape;
                    let last = *s.last().unwrap();
                    (s.iter().product::<usize>() / last, last)
                };
                let r = g.len() / len;
                let mut da = vec![0.0; self.nodes[a].data.len()];
                for row in 0..r {
                    for col in 0..len {
                        da[row * c + start + col] = g[row * len + col];
                    }
                }
                self.acc(a, &da);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(x, &s)| x * s * (1.0 - s))
                    .collect();
                self.acc(a, &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(x, &xi)| x * gelu_bwd(xi))
                    .collect();
                self.acc(a, &da);
            }
            Op::SoftmaxLastDim { a } => {
                let a = *a;
                let s = &self.nodes[i].shape;
                let c = *s.last().unwrap();
                let r = g.len() / c;
                let mut da = vec![0.0; g.len()];
                for row in 0..r {
                    let p = &self.nodes[i].data[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for col in 0..c {
                        da[row * c + col] = p[col] * (gr[col] - dot);
                    }
                }
                self.acc(a, &da);
            }
            Op::LayerNormLastDim { a } => {
                let a = *a;
                let s = &self.nodes[i].shape;
                let c = *s.last().unwrap();
                let r = g.len() / c;
                let mut da = vec![0.0; g.len()];
                for row in 0..r {
                    let x = &self.nodes[a].data[row * c..(row + 1) * c];
                    let y = &self.nodes[i].data[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = x.iter().sum::<f64>() / c as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for col in 0..c {
                        da[row * c + col] = inv * (gr[col] - g_mean - y[col] * gy_mean);
                    }
                }
                self.acc(a, &da);
            }
            Op::MseMean { a, b } => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a].data.len() as f64;
                let gs = g[0];
                let da: Vec<f64> = self.nodes[a]
                    .data
                    .iter()
                    .zip(&self.nodes[b].data)
                    .map(|(x, y)| gs * 2.0 * (x - y) / n)
                    .collect();
                let db: Vec<f64> = da.iter().map(|x| -x).collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                let idx = idx.clone();
                let c = if idx.is_empty() {
                    0
                } else {
                    g.len() / idx.len()
                };
                for (j, &row) in idx.iter().enumerate() {
                    self.acc_at(a, row * c, &g[j * c..(j + 1) * c]);
                }
            }
            Op::ScatterRows { base, rows, idx } => {
                let (base, rows) = (*base, *rows);
                let idx = idx.clone();
                let c = self.nodes[base].shape.last().copied().unwrap();
                // Base receives grad everywhere except the replaced rows.
                let mut dbase = g.to_vec();
                for &row in &idx {
                    dbase[row * c..(row + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                }
                self.acc(base, &dbase);
                let mut drows = vec![0.0; idx.len() * c];
                for (j, &row) in idx.iter().enumerate() {
                    drows[j * c..(j + 1) * c].copy_from_slice(&g[row * c..(row + 1) * c]);
                }
                self.acc(rows, &drows);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let probs = probs.clone();
                let (n, d) = {
                    let s = &self.nodes[i].shape;
                    (s[0], s[1])
                };
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                for h in 0..heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let qh = gather_cols(&self.nodes[q].data, n, d, h * dh, dh);
                    let kh = gather_cols(&self.nodes[k].data, n, d, h * dh, dh);
                    let vh = gather_cols(&self.nodes[v].data, n, d, h * dh, dh);
                    let goh = gather_cols(g, n, d, h * dh, dh);
                    // dV_h = P^T dO_h
                    let dvh = mm(view(p, n, n).t(), view(&goh, n, dh));
                    // dP = dO_h V_h^T ; dS = P o (dP - rowsum(dP o P))
                    let dp = mm(view(&goh, n, dh), view(&vh, n, dh).t());
                    let mut ds = vec![0.0; n * n];
                    for row in 0..n {
                        let dot: f64 = (0..n)
                            .map(|c2| dp[row * n + c2] * p[row * n + c2])
                            .sum();
                        for c2 in 0..n {
                            ds[row * n + c2] = p[row * n + c2] * (dp[row * n + c2] - dot);
                        }
                    }
                    let mut dqh = mm(view(&ds, n, n), view(&kh, n, dh));
                    dqh.iter_mut().for_each(|x| *x *= scale);
                    let mut dkh = mm(view(&ds, n, n).t(), view(&qh, n, dh));
                    dkh.iter_mut().for_each(|x| *x *= scale);
                    scatter_cols(&mut dq, n, d, h * dh, dh, &dqh);
                    scatter_cols(&mut dk, n, d, h * dh, dh, &dkh);
                    scatter_cols(&mut dv, n, d, h * dh, dh, &dvh);
                }
                self.acc(q, &dq);
                self.acc(k, &dk);
                self.acc(v, &dv);
            }
        }
    }
}

fn gather_cols(data: &[f64], rows: usize, width: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&data[r * width + start..r * width + start + len]);
    }
    out
}

fn scatter_cols(out: &mut [f64], rows: usize, width: usize, start: usize, len: usize, src: &[f64]) {
    for r in 0..rows {
        out[r * width + start..r * width + start + len]
            .copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}
