//! Reverse-mode tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append a
//! node and return a [`Var`] handle; [`Tape::backward`] walks the nodes in
//! reverse creation order. Leaf gradients persist on the tape and accumulate
//! across repeated `backward` calls; parameter leaves are drained into a
//! [`ParamStore`](super::ParamStore) with `ParamStore::absorb_grads`.

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{GladError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalarVar(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    t.dims2()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any has flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters become
    /// constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf { param: Some(id) }, p.requires_grad)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(super) fn param_leaves(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((i, id)),
            _ => None,
        })
    }

    pub(super) fn take_leaf_grad(&mut self, index: usize) -> Option<Tensor<T>> {
        self.leaf_grads[index].take()
    }

    /// Attention probabilities `[batch, heads, seq, seq]` recorded by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs,
                batch,
                heads,
                seq,
                ..
            } => Some((probs.as_slice(), *batch, *heads, *seq)),
            _ => None,
        }
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(GladError::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · wᵀ + b` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = shape2(tx);
        if tw.shape().len() != 2 || tw.shape()[1] != k {
            return Err(GladError::dim("linear", tx.shape(), tw.shape()));
        }
        let n = tw.shape()[0];
        let mut out = vec![T::ZERO; m * n];
        matmul_nt_acc(tx.data(), tw.data(), &mut out, m, k, n);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n {
                return Err(GladError::dim("linear bias", tw.shape(), tb.shape()));
            }
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(tb.data()) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(GladError::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(GladError::dim("mul_scalar_var", self.value(x).shape(), ts.shape()));
        }
        let sv = ts.data()[0];
        let out = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulScalarVar(x, s), ng))
    }

    /// `x[b*period + i, :] + tile[i, :]` for every block `b`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(tile));
        let (r, c) = shape2(tx);
        let (tr, tc) = shape2(tt);
        if tc != c || r % tr != 0 {
            return Err(GladError::dim("add_tiled", tx.shape(), tt.shape()));
        }
        let mut out = tx.data().to_vec();
        for (chunk_i, row) in out.chunks_mut(c).enumerate() {
            let trow = tt.row(chunk_i % tr);
            for (o, &t) in row.iter_mut().zip(trow) {
                *o += t;
            }
        }
        let ng = self.ng(x) || self.ng(tile);
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::AddTiled(x, tile), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return Err(GladError::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = vec![T::ZERO; r * c];
        let mut rstd = vec![T::ZERO; r];
        for i in 0..r {
            let row = tx.row(i);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[i] = rs;
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mean) * rs * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(GladError::Numeric("softmax_rows: non-finite input".into()));
        }
        let (r, c) = shape2(tx);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            softmax_into(tx.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Causal multi-head attention over `batch` independent sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch*seq, d]` with heads laid out in
    /// contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (r, d) = shape2(tq);
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(GladError::dim("attention", tq.shape(), tk.shape()));
        }
        if r != batch * seq || heads == 0 || d % heads != 0 {
            return Err(GladError::Contract(format!(
                "attention layout: {r} rows for batch {batch} x seq {seq}, width {d} over {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        let mut out = vec![T::ZERO; r * d];
        let mut scores = vec![T::ZERO; seq];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        let mut s = T::ZERO;
                        for t in 0..dh {
                            s += qi[t] * kj[t];
                        }
                        scores[j] = s * scale;
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + i * seq + seq];
                    softmax_into(&scores[..=i], &mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        for t in 0..dh {
                            orow[t] += p * vj[t];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let out = Tensor::new(tq.shape(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(GladError::Index { index: i, bound: r });
            }
            out.extend_from_slice(tx.row(i));
        }
        if idx.is_empty() {
            return Err(GladError::Contract("gather_rows: empty index list".into()));
        }
        let ng = self.ng(x);
        let out = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GladError::Contract("concat_rows: no inputs".into()))?;
        let c = shape2(self.value(*first)).1;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if shape2(t).1 != c {
                return Err(GladError::dim("concat_rows", self.value(*first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let rows = out.len() / c;
        let out = Tensor::new(&[rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = shape2(ta);
        let (rb, cb) = shape2(tb);
        if ra != rb {
            return Err(GladError::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(&[ra, ca + cb], out)?;
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = shape2(tl);
        if targets.len() != r {
            return Err(GladError::dim("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GladError::Index { index: bad, bound: c });
        }
        if !tl.all_finite() {
            return Err(GladError::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut probs = vec![T::ZERO; r * c];
        let mut total = T::ZERO;
        for i in 0..r {
            let row = tl.row(i);
            let m = row.iter().copied().fold(row[0], T::max);
            let mut s = T::ZERO;
            for &v in row {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            total += lse - row[targets[i]];
            let prow = &mut probs[i * c..(i + 1) * c];
            for j in 0..c {
                prow[j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_f64(r as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(GladError::dim("mse", ta.shape(), tb.shape()));
        }
        let mut s = T::ZERO;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            s += d * d;
        }
        let loss = s / T::from_f64(ta.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    // ---- backward ----------------------------------------------------------

    /// Propagate d`loss`/d(node) to every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(GladError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf { .. } = self.nodes[id].op {
                let shape = self.nodes[id].value.shape().to_vec();
                match &mut self.leaf_grads[id] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(Tensor::new(&shape, g)?),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! buf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::ZERO; nodes[$v.0].value.len()])
            };
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = shape2(val(*b)).1;
                if want(*a) {
                    // dA = G · Bᵀ
                    let bdata = val(*b).data();
                    matmul_nt_acc(g, bdata, buf!(*a), m, n, k);
                }
                if want(*b) {
                    // dB = Aᵀ · G
                    let adata = val(*a).data();
                    matmul_tn_acc(adata, g, buf!(*b), m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = shape2(val(*x));
                let n = val(*w).shape()[0];
                if want(*x) {
                    // dX = G · W
                    matmul_acc(g, val(*w).data(), buf!(*x), m, n, k);
                }
                if want(*w) {
                    // dW = Gᵀ · X
                    matmul_tn_acc(g, val(*x).data(), buf!(*w), m, n, k);
                }
                if let Some(b) = b {
                    if want(*b) {
                        let db = buf!(*b);
                        for row in g.chunks(n) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(buf!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(buf!(*a), g);
                }
                if want(*b) {
                    for (d, &gv) in buf!(*b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = val(*b).data();
                    for ((d, &gv), &y) in buf!(*a).iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if want(*b) {
                    let av = val(*a).data();
                    for ((d, &gv), &x) in buf!(*b).iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    for (d, &gv) in buf!(*a).iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::MulScalarVar(x, s) => {
                let sv = val(*s).data()[0];
                if want(*x) {
                    for (d, &gv) in buf!(*x).iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                }
                if want(*s) {
                    let mut acc = T::ZERO;
                    for (&gv, &xv) in g.iter().zip(val(*x).data()) {
                        acc += gv * xv;
                    }
                    buf!(*s)[0] += acc;
                }
            }
            Op::AddTiled(x, tile) => {
                if want(*x) {
                    add_into(buf!(*x), g);
                }
                if want(*tile) {
                    let (tr, c) = shape2(val(*tile));
                    let dt = buf!(*tile);
                    for (chunk_i, row) in g.chunks(c).enumerate() {
                        let off = (chunk_i % tr) * c;
                        for (d, &gv) in dt[off..off + c].iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let c = T::from_f64(GELU_C);
                    let a = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three_a = T::from_f64(3.0 * GELU_A);
                    let xv = val(*x).data();
                    for ((d, &gv), &v) in buf!(*x).iter_mut().zip(g).zip(xv) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::ONE - t * t) * c * (T::ONE + three_a * v * v);
                        *d += gv * (half * (T::ONE + t) + half * v * dt);
                    }
                }
            }
            Op::Tanh(x) => {
                if want(*x) {
                    let yv = node.value.data();
                    for ((d, &gv), &y) in buf!(*x).iter_mut().zip(g).zip(yv) {
                        *d += gv * (T::ONE - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let yv = node.value.data();
                    for ((d, &gv), &y) in buf!(*x).iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (T::ONE - y);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let tx = val(*x);
                let (r, c) = shape2(tx);
                let gam = val(*gamma).data();
                let inv_c = T::from_f64(1.0 / c as f64);
                // xhat recomputed from the output: xhat = (y - beta) / gamma is
                // unstable for small gamma, so rebuild from x and rstd instead.
                let mut xhat = vec![T::ZERO; c];
                let mut dxhat = vec![T::ZERO; c];
                let (wx, wg, wb) = (want(*x), want(*gamma), want(*beta));
                for i in 0..r {
                    let row = tx.row(i);
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_c;
                    let rs = rstd[i];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rs;
                    }
                    let grow = &g[i * c..(i + 1) * c];
                    if wg {
                        let dg = buf!(*gamma);
                        for j in 0..c {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if wb {
                        add_into(buf!(*beta), grow);
                    }
                    if wx {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[j];
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        let dx = &mut buf!(*x)[i * c..(i + 1) * c];
                        for j in 0..c {
                            dx[j] += rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if want(*x) {
                    let (r, c) = shape2(&node.value);
                    let y = node.value.data();
                    let dx = buf!(*x);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut dot = T::ZERO;
                        for j in 0..c {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..c {
                            dx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = shape2(val(*q)).1;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::ZERO; qd.len()];
                let mut dk = vec![T::ZERO; kd.len()];
                let mut dv = vec![T::ZERO; vd.len()];
                let mut dp = vec![T::ZERO; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let ri = (b * seq + i) * d + col;
                            let gi = &g[ri..ri + dh];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + seq];
                            let mut dot = T::ZERO;
                            for j in 0..=i {
                                let rj = (b * seq + j) * d + col;
                                let mut s = T::ZERO;
                                for t in 0..dh {
                                    s += gi[t] * vd[rj + t];
                                }
                                dp[j] = s;
                                dot += prow[j] * s;
                                for t in 0..dh {
                                    dv[rj + t] += prow[j] * gi[t];
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let rj = (b * seq + j) * d + col;
                                for t in 0..dh {
                                    dq[ri + t] += ds * kd[rj + t];
                                    dk[rj + t] += ds * qd[ri + t];
                                }
                            }
                        }
                    }
                }
                for (var, gbuf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if want(var) {
                        add_into(buf!(var), &gbuf);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if want(*x) {
                    let c = shape2(val(*x)).1;
                    let dx = buf!(*x);
                    for (i, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if want(p) {
                        add_into(buf!(p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = shape2(val(*a));
                let cb = shape2(val(*b)).1;
                let c = ca + cb;
                if want(*a) {
                    let da = buf!(*a);
                    for i in 0..r {
                        add_into(&mut da[i * ca..(i + 1) * ca], &g[i * c..i * c + ca]);
                    }
                }
                if want(*b) {
                    let db = buf!(*b);
                    for i in 0..r {
                        add_into(&mut db[i * cb..(i + 1) * cb], &g[i * c + ca..(i + 1) * c]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if want(*logits) {
                    let (r, c) = shape2(val(*logits));
                    let scale = g[0] / T::from_f64(r as f64);
                    let dl = buf!(*logits);
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if j == targets[i] { T::ONE } else { T::ZERO };
                            dl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let coef = g[0] * T::from_f64(2.0 / av.len() as f64);
                if want(*a) {
                    for ((d, &x), &y) in buf!(*a).iter_mut().zip(av).zip(bv) {
                        *d += coef * (x - y);
                    }
                }
                if want(*b) {
                    for ((d, &x), &y) in buf!(*b).iter_mut().zip(av).zip(bv) {
                        *d -= coef * (x - y);
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    for d in buf!(*x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Max-subtracted softmax of `x` written into `out`.
fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(x[0], T::max);
    let mut s = T::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    let inv = T::ONE / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
