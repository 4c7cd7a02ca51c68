//! Forward rules (as methods on [`Var`]) and their vector-Jacobian products.

use super::tape::{Node, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        src: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        in_width: usize,
        offset: usize,
        width: usize,
    },
    Sum(usize),
    Mean(usize),
    SumLast {
        x: usize,
        last: usize,
    },
    Softmax {
        last: usize,
        x: usize,
    },
    LogSoftmax {
        last: usize,
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        last: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Relu(usize),
    Gather {
        table: usize,
        indices: Vec<usize>,
        width: usize,
    },
    SqNorm(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        classes: usize,
        count: usize,
    },
    Expand {
        x: usize,
        reps: usize,
    },
    StraightThrough {
        x: usize,
        mask: Vec<bool>,
    },
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / last, last)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Op {
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(s) = slot(nodes, grads, id) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(s) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(s) = slot(nodes, grads, *a) {
                    for bi in 0..*batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let sa = &mut s[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bb[p * n..(p + 1) * n];
                                sa[i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for bi in 0..*batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let sb = &mut s[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = ab[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let srow = &mut sb[p * n..(p + 1) * n];
                                for (s, &gv) in srow.iter_mut().zip(grow) {
                                    *s += a_ip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let (r, c) = (*rows, *cols);
                    for bi in 0..*batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                s[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Permute { x, src } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for (o, &i) in src.iter().enumerate() {
                        s[i] += g[o];
                    }
                }
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if let Some(s) = slot(nodes, grads, x) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            s[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                in_width,
                offset,
                width,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in 0..*outer {
                        let dst = &mut s[o * in_width + offset..o * in_width + offset + width];
                        dst.iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += c);
                }
            }
            Op::SumLast { x, last } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, &gv) in g.iter().enumerate() {
                        s[r * last..(r + 1) * last]
                            .iter_mut()
                            .for_each(|s| *s += gv);
                    }
                }
            }
            Op::Softmax { x, last } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let y = &node.value;
                    for r in 0..y.len() / last {
                        let ys = &y[r * last..(r + 1) * last];
                        let gs = &g[r * last..(r + 1) * last];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..*last {
                            s[r * last + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, last } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let y = &node.value;
                    for r in 0..y.len() / last {
                        let ys = &y[r * last..(r + 1) * last];
                        let gs = &g[r * last..(r + 1) * last];
                        let gsum: f64 = gs.iter().sum();
                        for j in 0..*last {
                            s[r * last + j] += gs[j] - ys[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                last,
                xhat,
                rstd,
            } => {
                let d = *last;
                let rows = g.len() / d;
                let gam = &nodes[*gamma].value;
                if let Some(s) = slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let xv = &nodes[*x].value;
                    for i in 0..g.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let xv = &nodes[*x].value;
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Gather {
                table,
                indices,
                width,
            } => {
                if let Some(s) = slot(nodes, grads, *table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        let dst = &mut s[idx * width..(idx + 1) * width];
                        dst.iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::SqNorm(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let xv = &nodes[*x].value;
                    for i in 0..s.len() {
                        s[i] += 2.0 * xv[i] * g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
                count,
            } => {
                if let Some(s) = slot(nodes, grads, *logits) {
                    let c = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..*classes {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            s[r * classes + j] += c * (probs[r * classes + j] - onehot);
                        }
                    }
                }
            }
            Op::Expand { x, reps } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let w = s.len();
                    for r in 0..*reps {
                        s.iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::StraightThrough { x, mask } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if mask[i] {
                            s[i] += g[i];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    fn emit(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var<'t>]) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        let id = self.tape.push(shape, value, op, rg);
        self.tape.var(id)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(a)
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let shape = self.same_shape(&other, name)?;
        let value: Vec<f64> = {
            let (a, b) = (self.value(), other.value());
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.emit(shape, value, op, &[self, other]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().iter().map(|v| v * c).collect();
        self.emit(self.shape(), value, Op::Scale(self.id, c), &[self])
    }

    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (a, b) = (self.value(), other.value());
            for bi in 0..batch {
                gemm(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
        };
        Ok(self.emit(shape, out, op, &[self, other]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        let (batch, rows, cols) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::dim("transpose", &s, &[])),
        };
        let mut out = vec![0.0; batch * rows * cols];
        {
            let x = self.value();
            for bi in 0..batch {
                let off = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[off + j * rows + i] = x[off + i * cols + j];
                    }
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let op = Op::Transpose {
            x: self.id,
            batch,
            rows,
            cols,
        };
        Ok(self.emit(shape, out, op, &[self]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape(), shape));
        }
        let value = self.value().to_vec();
        Ok(self.emit(shape.to_vec(), value, Op::Reshape(self.id), &[self]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let in_shape = self.shape();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &in_shape, perm));
        }
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let numel = self.numel();
        let mut src = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            src.push(
                idx.iter()
                    .zip(perm)
                    .map(|(&i, &p)| i * in_strides[p])
                    .sum::<usize>(),
            );
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let value = {
            let x = self.value();
            src.iter().map(|&i| x[i]).collect()
        };
        Ok(self.emit(out_shape, value, Op::Permute { x: self.id, src }, &[self]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim("concat", &base, &s));
            }
            widths.push(s[axis] * inner);
            axis_total += s[axis];
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for o in 0..outer {
                out[o * total + offset..o * total + offset + w]
                    .copy_from_slice(&v[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let op = Op::Concat {
            xs: parts.iter().map(|p| p.id).collect(),
            outer,
            widths,
        };
        Ok(first.emit(shape, out, op, parts))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_width = s[axis] * inner;
        let (offset, width) = (start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * width);
        {
            let v = self.value();
            for o in 0..outer {
                out.extend_from_slice(&v[o * in_width + offset..o * in_width + offset + width]);
            }
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let op = Op::Slice {
            x: self.id,
            outer,
            in_width,
            offset,
            width,
        };
        Ok(self.emit(shape, out, op, &[self]))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value().iter().sum();
        self.emit(vec![1], vec![v], Op::Sum(self.id), &[self])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value().iter().sum::<f64>() / self.numel() as f64;
        self.emit(vec![1], vec![v], Op::Mean(self.id), &[self])
    }

    /// Sums over the last axis: `[.., k] -> [..]` (`[1]` for a vector input).
    pub fn sum_last(self) -> Var<'t> {
        let s = self.shape();
        let (rows, last) = split_last(&s);
        let value: Vec<f64> = {
            let v = self.value();
            (0..rows)
                .map(|r| v[r * last..(r + 1) * last].iter().sum())
                .collect()
        };
        let shape = if s.len() > 1 {
            s[..s.len() - 1].to_vec()
        } else {
            vec![1]
        };
        self.emit(shape, value, Op::SumLast { x: self.id, last }, &[self])
    }

    fn row_softmax(&self, log: bool) -> Result<(Vec<f64>, usize)> {
        let s = self.shape();
        let (rows, last) = split_last(&s);
        let v = self.value();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let xs = &v[r * last..(r + 1) * last];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
            let lz = z.ln();
            for j in 0..last {
                out[r * last + j] = if log {
                    xs[j] - mx - lz
                } else {
                    (xs[j] - mx).exp() / z
                };
            }
        }
        Ok((out, last))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let (out, last) = self.row_softmax(false)?;
        Ok(self.emit(self.shape(), out, Op::Softmax { x: self.id, last }, &[self]))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (out, last) = self.row_softmax(true)?;
        Ok(self.emit(self.shape(), out, Op::LogSoftmax { x: self.id, last }, &[self]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let (rows, d) = split_last(&s);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim("layer_norm", &s, &gamma.shape()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            for r in 0..rows {
                let xs = &x[r * d..(r + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xs[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm[j] + bt[j];
                }
            }
        }
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            last: d,
            xhat,
            rstd,
        };
        Ok(self.emit(s, out, op, &[self, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let value = self.value().iter().map(|&x| gelu(x)).collect();
        self.emit(self.shape(), value, Op::Gelu(self.id), &[self])
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().iter().map(|&x| x.max(0.0)).collect();
        self.emit(self.shape(), value, Op::Relu(self.id), &[self])
    }

    /// Row lookup into a `[vocab, width]` table.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let [rows, width] = s[..] else {
            return Err(Error::dim("gather_rows", &s, &[]));
        };
        let mut out = Vec::with_capacity(indices.len() * width);
        {
            let t = self.value();
            for &i in indices {
                if i >= rows {
                    return Err(Error::Index {
                        what: "embedding row",
                        index: i,
                        lo: 0,
                        hi: rows - 1,
                    });
                }
                out.extend_from_slice(&t[i * width..(i + 1) * width]);
            }
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let op = Op::Gather {
            table: self.id,
            indices: indices.to_vec(),
            width,
        };
        Ok(self.emit(vec![indices.len(), width], out, op, &[self]))
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(self) -> Var<'t> {
        let v = self.value().iter().map(|x| x * x).sum();
        self.emit(vec![1], vec![v], Op::SqNorm(self.id), &[self])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, classes]` logits. `None` targets are skipped.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let s = self.shape();
        let [rows, classes] = s[..] else {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        };
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        let (probs, _) = self.row_softmax(false)?;
        let mut nll = 0.0;
        let mut count = 0;
        {
            let (lsm, _) = self.row_softmax(true)?;
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                if t >= classes {
                    return Err(Error::Index {
                        what: "cross-entropy target",
                        index: t,
                        lo: 0,
                        hi: classes - 1,
                    });
                }
                nll -= lsm[r * classes + t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
            classes,
            count,
        };
        Ok(self.emit(vec![1], vec![nll / count as f64], op, &[self]))
    }

    /// Explicit tiling: `self` must have shape equal to the trailing axes of
    /// `shape`; the leading axes are filled with copies.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let fits = shape.len() >= s.len() && shape[shape.len() - s.len()..] == s[..];
        // a [1]-shaped scalar may tile to anything
        let scalar = s == [1];
        if !fits && !scalar {
            return Err(Error::dim("expand", &s, shape));
        }
        let total: usize = shape.iter().product();
        let w = self.numel();
        let reps = total / w;
        let mut out = Vec::with_capacity(total);
        {
            let v = self.value();
            for _ in 0..reps {
                out.extend_from_slice(&v);
            }
        }
        Ok(self.emit(shape.to_vec(), out, Op::Expand { x: self.id, reps }, &[self]))
    }

    /// Replaces the forward value with `values`; the backward passes the
    /// upstream gradient unchanged where `mask` is true and blocks it elsewhere.
    pub fn straight_through(self, values: Vec<f64>, mask: Vec<bool>) -> Result<Var<'t>> {
        if values.len() != self.numel() || mask.len() != self.numel() {
            return Err(Error::dim("straight_through", &self.shape(), &[values.len()]));
        }
        let op = Op::StraightThrough { x: self.id, mask };
        Ok(self.emit(self.shape(), values, op, &[self]))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }
}
