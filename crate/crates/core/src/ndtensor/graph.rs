use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{mm_acc, mm_nt_acc, mm_tn_acc, transpose};
use super::tensor::{Real, Tensor};
use super::BCE_EPS;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    idx: usize,
    graph: u64,
}

impl Value {
    /// Opaque id of the graph that produced this value.
    pub fn graph_id(&self) -> u64 {
        self.graph
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, g: usize, b: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: usize },
    Concat { inputs: Vec<usize>, extents: Vec<usize>, outer: usize, inner: usize },
    Narrow { a: usize, start: usize, len: usize, extent: usize, outer: usize, inner: usize },
    Gather { a: usize, indices: Vec<usize>, row_len: usize },
    Sum { a: usize },
    Mean { a: usize },
    Mse { a: usize, b: usize },
    Bce { p: usize, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `b` broadcasts onto `a` when equal, or when `a`'s trailing axes match
/// `b` after stripping `b`'s leading unit axes.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let b_core: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if b_core.is_empty() {
        return b.iter().product::<usize>() == 1;
    }
    a.len() >= b_core.len() && a[a.len() - b_core.len()..] == b_core[..]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    fn ix(&self, v: Value) -> usize {
        assert_eq!(v.graph, self.id, "value belongs to a different graph");
        v.idx
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Value {
        self.nodes.push(Node { value, op, requires_grad });
        Value { idx: self.nodes.len() - 1, graph: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Value {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Value {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Value {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.nodes[self.ix(v)].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Value) -> T {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.rg(self.ix(v))
    }

    /// Gradient of the last `backward` target with respect to `v`. `None`
    /// for values that do not require gradients.
    pub fn grad(&self, v: Value) -> Option<&Tensor<T>> {
        let i = self.ix(v);
        if !self.rg(i) {
            return None;
        }
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    fn binary_broadcast(&mut self, a: Value, b: Value, name: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let bl = tb.len();
        let bd = tb.data();
        let data: Vec<T> = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        Ok((ia, ib, Tensor::new(ta.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib, out) = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        if self.nodes[ia].value.shape() != self.nodes[ib].value.shape() {
            return Err(shape_err("sub", self.nodes[ia].value.shape(), self.nodes[ib].value.shape()));
        }
        let (_, _, out) = self.binary_broadcast(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Sub { a: ia, b: ib }, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib, out) = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let ia = self.ix(a);
        let c = T::lit(c);
        let out = self.nodes[ia].value.map(|x| x * c);
        let rg = self.rg(ia);
        self.push(out, Op::Scale { a: ia, c }, rg)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        mm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    /// Affine map over the trailing axis: `x[.., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let (ix, iw) = (self.ix(x), self.ix(w));
        let ib = b.map(|b| self.ix(b));
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if tw.shape().len() != 2 || tx.last_dim() != tw.shape()[0] {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let (m, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        if let Some(ib) = ib {
            let tb = &self.nodes[ib].value;
            if tb.len() != n {
                return Err(shape_err("linear bias", tw.shape(), tb.shape()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        mm_acc(tx.data(), tw.data(), &mut out, m, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x: ix, w: iw, b: ib, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let ia = self.ix(a);
        let ta = &self.nodes[ia].value;
        if ta.shape().len() != 2 {
            return Err(Error::Dimension(format!("transpose needs a matrix, got {:?}", ta.shape())));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![cols, rows], transpose(ta.data(), rows, cols))?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Transpose { a: ia, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.ix(a);
        let out = self.nodes[ia].value.clone().reshaped(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape { a: ia }, rg))
    }

    /// Softmax over the trailing axis, with max subtraction.
    pub fn softmax(&mut self, a: Value) -> Value {
        let ia = self.ix(a);
        let ta = &self.nodes[ia].value;
        let c = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            let inv = T::one() / s;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(ia);
        self.push(out, Op::Softmax { a: ia }, rg)
    }

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let (ix, ig, ib) = (self.ix(x), self.ix(gain), self.ix(bias));
        let tx = &self.nodes[ix].value;
        let c = tx.last_dim();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", tx.shape(), g.shape()));
        }
        let rows = tx.rows();
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(out, Op::LayerNorm { x: ix, g: ig, b: ib, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Value) -> Value {
        let ia = self.ix(a);
        let out = self.nodes[ia].value.map(gelu_fwd);
        let rg = self.rg(ia);
        self.push(out, Op::Gelu { a: ia }, rg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero values".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&v| self.ix(v)).collect();
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extents = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(shape_err("concat", &first, s));
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &e) in idx.iter().zip(&extents) {
                let d = self.nodes[i].value.data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: idx, extents, outer, inner }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let ia = self.ix(a);
        let shape = self.nodes[ia].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&d[base + start * inner..base + (start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(ia);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Narrow { a: ia, start, len, extent, outer, inner }, rg))
    }

    /// Select rows along axis 0. Indices may repeat; gradients accumulate.
    pub fn gather(&mut self, a: Value, indices: &[usize]) -> Result<Value> {
        let ia = self.ix(a);
        let ta = &self.nodes[ia].value;
        let n0 = ta.shape()[0];
        if indices.is_empty() {
            return Err(Error::Dimension("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n0) {
            return Err(Error::Dimension(format!("gather index {bad} out of range for {:?}", ta.shape())));
        }
        let row_len = ta.len() / n0;
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            out.extend_from_slice(&ta.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { a: ia, indices: indices.to_vec(), row_len }, rg))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let ia = self.ix(a);
        let s = self.nodes[ia].value.sum();
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Sum { a: ia }, rg)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let ia = self.ix(a);
        let t = &self.nodes[ia].value;
        let s = t.sum() / T::lit(t.len() as f64);
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Mean { a: ia }, rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.ix(a), self.ix(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse_loss", ta.shape(), tb.shape()));
        }
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / T::lit(ta.len() as f64));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mse { a: ia, b: ib }, rg))
    }

    /// Binary cross-entropy `-(1/n) Σ [y ln p + (1-y) ln(1-p)]` with `p`
    /// clamped to `[ε, 1-ε]`.
    pub fn bce_loss(&mut self, p_pos: Value, targets: &[u8]) -> Result<Value> {
        let ip = self.ix(p_pos);
        let tp = &self.nodes[ip].value;
        if tp.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce_loss: {} probabilities vs {} labels",
                tp.len(),
                targets.len()
            )));
        }
        let eps = T::lit(BCE_EPS);
        let one = T::one();
        let ys: Vec<T> = targets.iter().map(|&y| if y != 0 { one } else { T::zero() }).collect();
        let mut s = T::zero();
        for (&p, &y) in tp.data().iter().zip(&ys) {
            let p = p.max(eps).min(one - eps);
            s += y * p.ln() + (one - y) * (one - p).ln();
        }
        let out = Tensor::scalar(-s / T::lit(ys.len() as f64));
        let rg = self.rg(ip);
        Ok(self.push(out, Op::Bce { p: ip, targets: ys }, rg))
    }

    /// Reverse sweep from scalar `loss`. Populates gradients of every node
    /// that requires them; previous gradients are discarded.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        let il = self.ix(loss);
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(il) {
            self.grads = grads;
            return Ok(());
        }
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), T::one()));
        for i in (0..=il).rev() {
            if !self.rg(i) {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| Tensor::zeros(nodes[j].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| {
                    let bl = gb.len();
                    for (k, &v) in gd.iter().enumerate() {
                        gb[k % bl] += v;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| {
                    for (x, &v) in gb.iter_mut().zip(gd) {
                        *x -= v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                let bl = bd.len();
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += gd[k] * bd[k % bl];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, &v) in gd.iter().enumerate() {
                        gb[k % bl] += v * ad[k];
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| {
                for (x, &v) in ga.iter_mut().zip(gd) {
                    *x += v * *c;
                }
            }),
            Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |ga| mm_nt_acc(gd, bd, ga, *m, *n, *k));
                acc(*b, &mut |gb| mm_tn_acc(ad, gd, gb, *m, *k, *n));
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (xd, wd) = (nodes[*x].value.data(), nodes[*w].value.data());
                acc(*x, &mut |gx| mm_nt_acc(gd, wd, gx, *m, *n, *k));
                acc(*w, &mut |gw| mm_tn_acc(xd, gd, gw, *m, *k, *n));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in gd.chunks_exact(*n) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Transpose { a, rows, cols } => {
                let gt = transpose(gd, *cols, *rows);
                acc(*a, &mut |ga| add_into(ga, &gt));
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, gd)),
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gd.chunks_exact(c)) {
                        let dotp: T = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm { x, g: gi, b: bi, xhat, rstd } => {
                let c = node.value.last_dim();
                let gain = nodes[*gi].value.data();
                let inv_c = T::one() / T::lit(c as f64);
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dy = &gd[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dxh = dy[j] * gain[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..c {
                            let dxh = dy[j] * gain[j];
                            gx[r * c + j] += rs * (dxh - inv_c * s1 - xh[j] * inv_c * s2);
                        }
                    }
                });
                acc(*gi, &mut |gg| {
                    for (dy, xh) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(*bi, &mut |gb| {
                    for dy in gd.chunks_exact(c) {
                        add_into(gb, dy);
                    }
                });
            }
            Op::Gelu { a } => {
                let ad = nodes[*a].value.data();
                acc(*a, &mut |ga| {
                    for ((x, &v), &dy) in ga.iter_mut().zip(ad).zip(gd) {
                        *x += dy * gelu_grad(v);
                    }
                });
            }
            Op::Concat { inputs, extents, outer, inner } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&j, &e) in inputs.iter().zip(extents) {
                    acc(j, &mut |gj| {
                        for o in 0..*outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + e) * inner];
                            add_into(&mut gj[o * e * inner..(o + 1) * e * inner], src);
                        }
                    });
                    offset += e;
                }
            }
            Op::Narrow { a, start, len, extent, outer, inner } => acc(*a, &mut |ga| {
                for o in 0..*outer {
                    let dst = &mut ga[(o * extent + start) * inner..(o * extent + start + len) * inner];
                    add_into(dst, &gd[o * len * inner..(o + 1) * len * inner]);
                }
            }),
            Op::Gather { a, indices, row_len } => acc(*a, &mut |ga| {
                for (r, &src) in indices.iter().enumerate() {
                    add_into(
                        &mut ga[src * row_len..(src + 1) * row_len],
                        &gd[r * row_len..(r + 1) * row_len],
                    );
                }
            }),
            Op::Sum { a } => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += gd[0];
                }
            }),
            Op::Mean { a } => {
                let n = T::lit(nodes[*a].value.len() as f64);
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += gd[0] / n;
                    }
                })
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                let scale = T::lit(2.0) * gd[0] / T::lit(ad.len() as f64);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += scale * (ad[k] - bd[k]);
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= scale * (ad[k] - bd[k]);
                    }
                });
            }
            Op::Bce { p, targets } => {
                let pd = nodes[*p].value.data();
                let eps = T::lit(BCE_EPS);
                let one = T::one();
                let n = T::lit(targets.len() as f64);
                acc(*p, &mut |gp| {
                    for k in 0..gp.len() {
                        let pk = pd[k];
                        if pk < eps || pk > one - eps {
                            continue;
                        }
                        let y = targets[k];
                        gp[k] += -gd[0] / n * (y / pk - (one - y) / (one - pk));
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
