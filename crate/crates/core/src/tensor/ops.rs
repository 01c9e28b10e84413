//! Differentiable kernels. Each forward method on [`Var`] records an [`Op`]
//! whose `backward` arm implements the matching adjoint.

use rand::Rng;

use super::tape::{Node, Var};
use super::{Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(super) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Ln { a: usize, floor: f64 },
    Recip(usize),
    Softmax { a: usize, outer: usize, axis: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
    Concat { parts: Vec<(usize, usize)> },
    Sum(usize),
    Mean(usize),
    SumLast { a: usize, n: usize },
    Dot(usize, usize),
    PairwiseSqDist { a: usize, b: usize, n: usize, m: usize, e: usize },
    NormLast { a: usize, n: usize },
    Diag { a: usize, n: usize },
    Embedding { table: usize, ids: Vec<usize>, dim: usize },
    TakePosition { a: usize, t: usize, steps: usize, dim: usize },
    Pick { a: usize, idx: Vec<usize> },
    Attention(Box<AttentionSaved>),
}

pub(super) struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    batch: usize,
    steps: usize,
    dim: usize,
    heads: usize,
    probs: Vec<f64>,
}

impl Op {
    pub(super) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | AddCol(a, b)
            | MulCol(a, b) | Dot(a, b) => vec![*a, *b],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } | PairwiseSqDist { a, b, .. } => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a) | Reshape(a) | Relu(a) | Gelu(a) | Exp(a) | Recip(a)
            | Sum(a) | Mean(a) => vec![*a],
            Transpose { a, .. }
            | Ln { a, .. }
            | Softmax { a, .. }
            | Dropout { a, .. }
            | SumLast { a, .. }
            | NormLast { a, .. }
            | Diag { a, .. }
            | TakePosition { a, .. }
            | Pick { a, .. } => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat { parts } => parts.iter().map(|p| p.0).collect(),
            Embedding { table, .. } => vec![*table],
            Attention(s) => vec![s.q, s.k, s.v],
        }
    }

    /// Propagates `g` (the gradient of this node's output) to its parents.
    pub(super) fn backward(
        &self,
        out: &Tensor,
        g: &[f64],
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |i: usize| nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[i].requires_grad {
                let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
                f(buf);
            }
        };
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |gi, bi| gi * bi));
                acc(*b, &mut |d| zip3(d, g, av, |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |gi, bi| gi / bi));
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| axpy(d, g, *c)),
            Op::AddScalar(a) => acc(*a, &mut |d| axpy(d, g, 1.0)),
            Op::AddRow(a, r) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                let n = nodes[*r].value.len();
                acc(*r, &mut |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::AddCol(a, c) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                let n = nodes[*a].value.last_dim();
                acc(*c, &mut |d| {
                    for (di, row) in d.iter_mut().zip(g.chunks(n)) {
                        *di += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let n = nodes[*a].value.last_dim();
                acc(*a, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        axpy(drow, grow, cv[r]);
                    }
                });
                acc(*c, &mut |d| {
                    for (r, di) in d.iter_mut().enumerate() {
                        *di += dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| mm_bt(g, bv, d, *m, *n, *k));
                acc(*b, &mut |d| mm_at(av, g, d, *m, *k, *n));
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb, so) = (m * k, k * n, m * n);
                acc(*a, &mut |d| {
                    for i in 0..*batch {
                        mm_bt(
                            &g[i * so..(i + 1) * so],
                            &bv[i * sb..(i + 1) * sb],
                            &mut d[i * sa..(i + 1) * sa],
                            *m,
                            *n,
                            *k,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..*batch {
                        mm_at(
                            &av[i * sa..(i + 1) * sa],
                            &g[i * so..(i + 1) * so],
                            &mut d[i * sb..(i + 1) * sb],
                            *m,
                            *k,
                            *n,
                        );
                    }
                });
            }
            Op::Transpose { a, rows, cols } => acc(*a, &mut |d| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        d[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |d| axpy(d, g, 1.0)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| zip3(d, g, av, |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| zip3(d, g, av, |gi, x| gi * gelu_grad(x)));
            }
            Op::Exp(a) => acc(*a, &mut |d| zip3(d, g, out.data(), |gi, y| gi * y)),
            Op::Ln { a, floor } => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    zip3(d, g, av, |gi, x| if x > *floor { gi / x } else { 0.0 })
                });
            }
            Op::Recip(a) => acc(*a, &mut |d| zip3(d, g, out.data(), |gi, y| -gi * y * y)),
            Op::Softmax { a, outer, axis, inner } => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis * inner + i;
                            let mut s = 0.0;
                            for j in 0..*axis {
                                let ix = base + j * inner;
                                s += y[ix] * g[ix];
                            }
                            for j in 0..*axis {
                                let ix = base + j * inner;
                                d[ix] += y[ix] * (g[ix] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        axpy(d, grow, 1.0);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            drow[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |d| zip3(d, g, mask, |gi, m| gi * m)),
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(drow, &grow[off..off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumLast { a, n } => acc(*a, &mut |d| {
                for (drow, gi) in d.chunks_mut(*n).zip(g) {
                    drow.iter_mut().for_each(|x| *x += gi);
                }
            }),
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| axpy(d, bv, g[0]));
                acc(*b, &mut |d| axpy(d, av, g[0]));
            }
            Op::PairwiseSqDist { a, b, n, m, e } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..*n {
                        for j in 0..*m {
                            let c = 2.0 * g[i * m + j];
                            for t in 0..*e {
                                d[i * e + t] += c * (av[i * e + t] - bv[j * e + t]);
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..*n {
                        for j in 0..*m {
                            let c = 2.0 * g[i * m + j];
                            for t in 0..*e {
                                d[j * e + t] -= c * (av[i * e + t] - bv[j * e + t]);
                            }
                        }
                    }
                });
            }
            Op::NormLast { a, n } => {
                let av = val(*a);
                let y = out.data();
                acc(*a, &mut |d| {
                    for (r, drow) in d.chunks_mut(*n).enumerate() {
                        if y[r] > 0.0 {
                            let c = g[r] / y[r];
                            axpy(drow, &av[r * n..(r + 1) * n], c);
                        }
                    }
                });
            }
            Op::Diag { a, n } => acc(*a, &mut |d| {
                for i in 0..*n {
                    d[i * n + i] += g[i];
                }
            }),
            Op::Embedding { table, ids, dim } => acc(*table, &mut |d| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim], 1.0);
                }
            }),
            Op::TakePosition { a, t, steps, dim } => acc(*a, &mut |d| {
                for (b, grow) in g.chunks(*dim).enumerate() {
                    let o = (b * steps + t) * dim;
                    axpy(&mut d[o..o + dim], grow, 1.0);
                }
            }),
            Op::Pick { a, idx } => {
                let c = nodes[*a].value.last_dim();
                acc(*a, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * c + j] += g[r];
                    }
                });
            }
            Op::Attention(s) => attention_backward(s, g, nodes, grads),
        }
    }
}

fn attention_backward(
    s: &AttentionSaved,
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
) {
    let (bsz, t, e, h) = (s.batch, s.steps, s.dim, s.heads);
    let hd = e / h;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = nodes[s.q].value.data();
    let k = nodes[s.k].value.data();
    let v = nodes[s.v].value.data();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..bsz {
        for hh in 0..h {
            let col = hh * hd;
            for i in 0..t {
                let p = &s.probs[((b * h + hh) * t + i) * t..][..t];
                let gi = &g[(b * t + i) * e + col..][..hd];
                let mut sum = 0.0;
                for j in 0..t {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v[(b * t + j) * e + col..][..hd];
                    axpy(&mut dv[(b * t + j) * e + col..][..hd], gi, p[j]);
                    dp[j] = dot(gi, vj);
                    sum += p[j] * dp[j];
                }
                let qi = &q[(b * t + i) * e + col..][..hd];
                for j in 0..t {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - sum) * scale;
                    let kj = &k[(b * t + j) * e + col..][..hd];
                    axpy(&mut dq[(b * t + i) * e + col..][..hd], kj, ds);
                    axpy(&mut dk[(b * t + j) * e + col..][..hd], qi, ds);
                }
            }
        }
    }
    for (id, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if nodes[id].requires_grad {
            let buf = grads[id].get_or_insert_with(|| vec![0.0; d.len()]);
            axpy(buf, &d, 1.0);
        }
    }
}

#[inline]
fn axpy(d: &mut [f64], x: &[f64], a: f64) {
    for (di, xi) in d.iter_mut().zip(x) {
        *di += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn zip3(d: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..d.len() {
        d[i] += f(g[i], x[i]);
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(orow, &b[p * n..(p + 1) * n], av);
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut out[p * n..(p + 1) * n], grow, av);
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over the last axis with an optional 0/1 mask; masked entries get
/// probability exactly zero.
pub(crate) fn masked_softmax_rows(x: &[f64], mask: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (orow, xrow)) in out.chunks_mut(n).zip(x.chunks(n)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * n + j] != 0.0);
        let mx = (0..n)
            .filter(|&j| keep(j))
            .map(|j| xrow[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(TensorError::Contract(format!(
                "softmax row {r} has every position masked"
            )));
        }
        let mut s = 0.0;
        for j in 0..n {
            if keep(j) {
                orow[j] = (xrow[j] - mx).exp();
                s += orow[j];
            }
        }
        orow.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Scaled dot-product attention probabilities, shape `[B, H, T, T]`.
pub(crate) fn attention_probs(
    q: &[f64],
    k: &[f64],
    key_mask: Option<&[f64]>,
    batch: usize,
    steps: usize,
    dim: usize,
    heads: usize,
) -> Result<Vec<f64>> {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let t = steps;
    let mut probs = vec![0.0; batch * heads * t * t];
    let mut scores = vec![0.0; t];
    for b in 0..batch {
        let mrow = key_mask.map(|m| &m[b * t..(b + 1) * t]);
        for hh in 0..heads {
            let col = hh * hd;
            for i in 0..t {
                let qi = &q[(b * t + i) * dim + col..][..hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = scale * dot(qi, &k[(b * t + j) * dim + col..][..hd]);
                }
                let p = masked_softmax_rows(&scores, mrow, t)?;
                probs[((b * heads + hh) * t + i) * t..][..t].copy_from_slice(&p);
            }
        }
    }
    Ok(probs)
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

impl<'t> Var<'t> {
    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, &a, &b));
        }
        Ok(a)
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let shape = self.same_shape(other, name)?;
        let data = {
            let nodes = self.tape.nodes();
            let (a, b) = (nodes[self.id].value.data(), nodes[other.id].value.data());
            a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
        };
        self.tape.push(name, Tensor::new(shape, data)?, op)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        })?;
        self.tape.push(name, value, op)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    /// `x[..., n] + row[n]`, broadcasting the row over leading axes.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (xs, rs) = (self.shape(), row.shape());
        if rs.len() != 1 || xs.last() != rs.first() {
            return Err(shape_err("add_row", &xs, &rs));
        }
        let data = {
            let nodes = self.tape.nodes();
            let r = nodes[row.id].value.data();
            let mut d = nodes[self.id].value.data().to_vec();
            for chunk in d.chunks_mut(r.len()) {
                axpy(chunk, r, 1.0);
            }
            d
        };
        self.tape
            .push("add_row", Tensor::new(xs, data)?, Op::AddRow(self.id, row.id))
    }

    fn col_broadcast(&self, col: &Var<'t>, name: &'static str) -> Result<(Vec<usize>, usize)> {
        let (xs, cs) = (self.shape(), col.shape());
        if xs.is_empty() || xs[..xs.len() - 1] != cs[..] {
            return Err(shape_err(name, &xs, &cs));
        }
        let n = *xs.last().unwrap();
        Ok((xs, n))
    }

    /// `x[..., n] + col[...]`, broadcasting each column entry along the last axis.
    pub fn add_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (xs, n) = self.col_broadcast(col, "add_col")?;
        let data = {
            let nodes = self.tape.nodes();
            let c = nodes[col.id].value.data();
            let mut d = nodes[self.id].value.data().to_vec();
            for (chunk, ci) in d.chunks_mut(n).zip(c) {
                chunk.iter_mut().for_each(|v| *v += ci);
            }
            d
        };
        self.tape
            .push("add_col", Tensor::new(xs, data)?, Op::AddCol(self.id, col.id))
    }

    /// `x[..., n] * col[...]`, scaling each last-axis row by its column entry.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (xs, n) = self.col_broadcast(col, "mul_col")?;
        let data = {
            let nodes = self.tape.nodes();
            let c = nodes[col.id].value.data();
            let mut d = nodes[self.id].value.data().to_vec();
            for (chunk, ci) in d.chunks_mut(n).zip(c) {
                chunk.iter_mut().for_each(|v| *v *= ci);
            }
            d
        };
        self.tape
            .push("mul_col", Tensor::new(xs, data)?, Op::MulCol(self.id, col.id))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            mm(nodes[self.id].value.data(), nodes[other.id].value.data(), &mut out, m, k, n);
        }
        self.tape.push(
            "matmul",
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    /// Batched matrix product of `[B×m×k]` and `[B×k×n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(shape_err("bmm", &a, &b));
        }
        let (batch, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let nodes = self.tape.nodes();
            let (av, bv) = (nodes[self.id].value.data(), nodes[other.id].value.data());
            for i in 0..batch {
                mm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.tape.push(
            "bmm",
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.with_value(|t| {
            let d = t.data();
            let mut o = vec![0.0; d.len()];
            for i in 0..rows {
                for j in 0..cols {
                    o[j * rows + i] = d[i * cols + j];
                }
            }
            o
        });
        self.tape.push(
            "transpose",
            Tensor::new([cols, rows], data)?,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor binds.
    pub fn ln_floor(&self, floor: f64) -> Result<Var<'t>> {
        self.unary(
            "ln",
            |x| x.max(floor).ln(),
            Op::Ln {
                a: self.id,
                floor,
            },
        )
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.ln_floor(0.0)
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        self.unary("recip", |x| 1.0 / x, Op::Recip(self.id))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.with_value(|t| {
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mx = (0..n).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..n {
                        let e = (x[base + j * inner] - mx).exp();
                        y[base + j * inner] = e;
                        s += e;
                    }
                    for j in 0..n {
                        y[base + j * inner] /= s;
                    }
                }
            }
            y
        });
        self.tape.push(
            "softmax",
            Tensor::new(shape, data)?,
            Op::Softmax {
                a: self.id,
                outer,
                axis: n,
                inner,
            },
        )
    }

    /// Softmax over the last axis restricted to positions where `mask` is nonzero.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Var<'t>> {
        let shape = self.shape();
        if mask.shape() != shape.as_slice() {
            return Err(shape_err("masked_softmax", &shape, mask.shape()));
        }
        let n = *shape.last().unwrap_or(&1);
        let data = self.with_value(|t| masked_softmax_rows(t.data(), Some(mask.data()), n))?;
        let outer = data.len() / n.max(1);
        self.tape.push(
            "masked_softmax",
            Tensor::new(shape, data)?,
            Op::Softmax {
                a: self.id,
                outer,
                axis: n,
                inner: 1,
            },
        )
    }

    /// Per-row normalization over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xs = self.shape();
        let n = *xs.last().unwrap_or(&0);
        if n == 0 || gain.shape() != [n] || bias.shape() != [n] {
            return Err(shape_err("layer_norm", &xs, &gain.shape()));
        }
        let (y, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let x = nodes[self.id].value.data();
            let (gv, bv) = (nodes[gain.id].value.data(), nodes[bias.id].value.data());
            let rows = x.len() / n;
            let mut y = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    y[r * n + j] = gv[j] * h + bv[j];
                }
            }
            (y, xhat, rstd)
        };
        self.tape.push(
            "layer_norm",
            Tensor::new(xs, y)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout. Identity (same node) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - p);
        let (value, mask) = self.with_value(|t| {
            let mask: Vec<f64> = (0..t.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let d = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(t.shape().to_vec(), d), mask)
        });
        self.tape.push("dropout", value?, Op::Dropout { a: self.id, mask })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", &first.shape(), &s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = tape.nodes();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let d = nodes[p.id].value.data();
                for r in 0..rows {
                    out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        tape.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).zip(widths).collect(),
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with_value(Tensor::sum);
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let m = self.with_value(|t| t.sum() / t.len() as f64);
        self.tape.push("mean", Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Sums over the last axis.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| invalid("sum_last", "scalar input"))?;
        let data = self.with_value(|t| t.data().chunks(n).map(|c| c.iter().sum()).collect());
        self.tape.push(
            "sum_last",
            Tensor::new(shape[..shape.len() - 1].to_vec(), data)?,
            Op::SumLast { a: self.id, n },
        )
    }

    /// Full inner product of two same-shape tensors.
    pub fn dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "dot")?;
        let d = {
            let nodes = self.tape.nodes();
            dot(nodes[self.id].value.data(), nodes[other.id].value.data())
        };
        self.tape
            .push("dot", Tensor::scalar(d), Op::Dot(self.id, other.id))
    }

    /// Squared Euclidean distance between every row of `self[n×e]` and `other[m×e]`.
    pub fn pairwise_sq_dist(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
            return Err(shape_err("pairwise_sq_dist", &a, &b));
        }
        let (n, m, e) = (a[0], b[0], a[1]);
        let mut out = vec![0.0; n * m];
        {
            let nodes = self.tape.nodes();
            let (av, bv) = (nodes[self.id].value.data(), nodes[other.id].value.data());
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = av[i * e..(i + 1) * e]
                        .iter()
                        .zip(&bv[j * e..(j + 1) * e])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                }
            }
        }
        self.tape.push(
            "pairwise_sq_dist",
            Tensor::new([n, m], out)?,
            Op::PairwiseSqDist {
                a: self.id,
                b: other.id,
                n,
                m,
                e,
            },
        )
    }

    /// L2 norm over the last axis.
    pub fn l2_norm_last(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| invalid("l2_norm", "scalar input"))?;
        let data = self.with_value(|t| {
            t.data()
                .chunks(n)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        });
        self.tape.push(
            "l2_norm",
            Tensor::new(shape[..shape.len() - 1].to_vec(), data)?,
            Op::NormLast { a: self.id, n },
        )
    }

    /// Diagonal of a square matrix.
    pub fn diag(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(invalid("diag", format!("expects square matrix, got {s:?}")));
        }
        let n = s[0];
        let data = self.with_value(|t| (0..n).map(|i| t.data()[i * n + i]).collect());
        self.tape
            .push("diag", Tensor::new([n], data)?, Op::Diag { a: self.id, n })
    }

    /// Row lookup in an embedding table `[V×E]`; output `[ids.len()×E]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid("embedding", format!("id {bad} >= vocabulary size {vocab}")));
        }
        let data = self.with_value(|t| {
            ids.iter()
                .flat_map(|&i| t.data()[i * dim..(i + 1) * dim].iter().copied())
                .collect()
        });
        self.tape.push(
            "embedding",
            Tensor::new([ids.len(), dim], data)?,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
                dim,
            },
        )
    }

    /// Slice `[B×T×E] -> [B×E]` at sequence position `t`.
    pub fn take_position(&self, t: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(invalid("take_position", format!("position {t} for shape {s:?}")));
        }
        let (b, steps, dim) = (s[0], s[1], s[2]);
        let data = self.with_value(|v| {
            (0..b)
                .flat_map(|i| v.data()[(i * steps + t) * dim..][..dim].iter().copied())
                .collect()
        });
        self.tape.push(
            "take_position",
            Tensor::new([b, dim], data)?,
            Op::TakePosition {
                a: self.id,
                t,
                steps,
                dim,
            },
        )
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D input.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err("pick", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= s[1]) {
            return Err(invalid("pick", format!("index {bad} >= {}", s[1])));
        }
        let data = self.with_value(|t| idx.iter().enumerate().map(|(r, &j)| t.data()[r * s[1] + j]).collect());
        self.tape.push(
            "pick",
            Tensor::new([idx.len()], data)?,
            Op::Pick {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Attention probabilities `[B×H×T×T]` saved by an [`Var::attention`] node.
    pub fn saved_attention(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes();
        match &nodes[self.id].op {
            Op::Attention(s) => {
                Tensor::new([s.batch, s.heads, s.steps, s.steps], s.probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Multi-head scaled dot-product attention over `[B×T×E]` queries/keys/values.
    /// `key_mask` is `[B×T]` with 1 for real positions, 0 for padding.
    pub fn attention(
        q: &Var<'t>,
        k: &Var<'t>,
        v: &Var<'t>,
        heads: usize,
        key_mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let s = q.shape();
        if s.len() != 3 || k.shape() != s || v.shape() != s {
            return Err(shape_err("attention", &s, &k.shape()));
        }
        let (batch, steps, dim) = (s[0], s[1], s[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.shape() != [batch, steps] {
                return Err(shape_err("attention", &[batch, steps], m.shape()));
            }
        }
        let hd = dim / heads;
        let (out, probs) = {
            let nodes = q.tape.nodes();
            let (qv, kv, vv) = (
                nodes[q.id].value.data(),
                nodes[k.id].value.data(),
                nodes[v.id].value.data(),
            );
            let probs = attention_probs(qv, kv, key_mask.map(Tensor::data), batch, steps, dim, heads)?;
            let mut out = vec![0.0; qv.len()];
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * hd;
                    for i in 0..steps {
                        let p = &probs[((b * heads + h) * steps + i) * steps..][..steps];
                        let orow = &mut out[(b * steps + i) * dim + col..][..hd];
                        for (j, &pj) in p.iter().enumerate() {
                            if pj != 0.0 {
                                axpy(orow, &vv[(b * steps + j) * dim + col..][..hd], pj);
                            }
                        }
                    }
                }
            }
            (out, probs)
        };
        q.tape.push(
            "attention",
            Tensor::new(s, out)?,
            Op::Attention(Box::new(AttentionSaved {
                q: q.id,
                k: k.id,
                v: v.id,
                batch,
                steps,
                dim,
                heads,
                probs,
            })),
        )
    }
}
