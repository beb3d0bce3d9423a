//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] for the lifetime of the tape, and
//! [`Tape::backward`] accumulates their gradients into a separate
//! [`Gradients`] buffer, so several tapes can run against one store at once.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Maxout { x: NodeId, argmax: Vec<usize> },
    Window { x: NodeId, radius: usize },
    GatherSlots { x: NodeId, idx: Vec<Option<usize>> },
    Dropout { x: NodeId, mask: Vec<f64> },
    AttentionPool { tokens: NodeId, scores: NodeId, offsets: Vec<usize>, weights: Vec<f64> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Sum(NodeId),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the lengths implied by the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product used outside the tape (inference paths).
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, false, b, false, c, 0.0);
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

#[inline]
fn bidx(r: usize, c: usize, b: (usize, usize)) -> usize {
    (if b.0 == 1 { 0 } else { r }) * b.1 + if b.1 == 1 { 0 } else { c }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), rng: None }
    }

    /// Training-mode tape whose dropout masks come from `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Tape { params, nodes: Vec::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Softmax probabilities retained by a cross-entropy node.
    pub fn probabilities(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'p, [f64]>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, ids: &[NodeId]) -> Error {
        Error::Shape { op, shapes: ids.iter().map(|&i| self.shape(i)).collect() }
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        assert_eq!(values.len(), rows * cols, "constant: value count");
        self.push(rows, cols, Cow::Owned(values), Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let params = self.params;
        let t = params.get(id);
        let (r, c) = t.matrix_shape();
        self.push(r, c, Cow::Borrowed(&t.values), Op::Param(id), true)
    }

    /// Embedding lookup: selects rows of a parameter matrix.
    pub fn gather(&mut self, param: ParamId, rows: &[usize]) -> Result<NodeId> {
        let t = self.params.get(param);
        let (n, w) = t.matrix_shape();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape { op: "gather", shapes: vec![(n, w), (bad, 0)] });
        }
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&t.values[r * w..(r + 1) * w]);
        }
        Ok(self.push(rows.len(), w, Cow::Owned(out), Op::Gather { param, rows: rows.to_vec() }, true))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !broadcast_ok(sa, sb) {
            return Err(self.shape_err(name, &[a, b]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(sa.0 * sa.1);
        for r in 0..sa.0 {
            for c in 0..sa.1 {
                out.push(f(av[r * sa.1 + c], bv[bidx(r, c, sb)]));
            }
        }
        Ok((out, sa.0, sa.1))
    }

    /// `a + b`, where `b` may broadcast along rows and/or columns.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, r, c) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, Cow::Owned(out), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, r, c) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, Cow::Owned(out), Op::Sub(a, b), ng))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, r, c) = self.binary(a, b, "elementwise_mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, Cow::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, k) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(r, k, Cow::Owned(out), Op::Scale(a, c), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(self.shape_err("concat", parts));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(self.shape_err("concat", parts));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape { op: "slice", shapes: vec![(r, c), (start, len)] });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(r, len, Cow::Owned(out), Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Shape { op: "slice", shapes: vec![(r, c), (start, len)] });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(len, c, Cow::Owned(out), Op::SliceRows { x, start }, ng))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(r, c, Cow::Owned(out), op, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Maximum over `k` contiguous pieces of the last dimension.
    pub fn maxout(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if k == 0 || c % k != 0 {
            return Err(Error::Shape { op: "maxout", shapes: vec![(r, c), (k, 0)] });
        }
        let out_c = c / k;
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * out_c);
        let mut argmax = Vec::with_capacity(r * out_c);
        for g in 0..r * out_c {
            let base = g * k;
            let mut best = base;
            for j in base + 1..base + k {
                if v[j] > v[best] {
                    best = j;
                }
            }
            out.push(v[best]);
            argmax.push(best);
        }
        let ng = self.ng(x);
        Ok(self.push(r, out_c, Cow::Owned(out), Op::Maxout { x, argmax }, ng))
    }

    /// Row `i` becomes `[x_{i-r} | ... | x_i | ... | x_{i+r}]`, zero-padded at the ends.
    pub fn window(&mut self, x: NodeId, radius: usize) -> NodeId {
        let (r, c) = self.shape(x);
        let width = 2 * radius + 1;
        let v = self.value(x);
        let mut out = vec![0.0; r * c * width];
        for i in 0..r {
            for o in 0..width {
                let j = i as isize + o as isize - radius as isize;
                if j >= 0 && (j as usize) < r {
                    let j = j as usize;
                    let dst = i * c * width + o * c;
                    out[dst..dst + c].copy_from_slice(&v[j * c..(j + 1) * c]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(r, c * width, Cow::Owned(out), Op::Window { x, radius }, ng)
    }

    /// Builds `idx.len() / slots` rows, each the concatenation of `slots`
    /// selected rows of `x`; `None` selects a zero vector.
    pub fn gather_slots(&mut self, x: NodeId, idx: &[Option<usize>], slots: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if slots == 0 || !idx.len().is_multiple_of(slots) || idx.iter().flatten().any(|&i| i >= r) {
            return Err(Error::Shape { op: "gather_slots", shapes: vec![(r, c), (idx.len(), slots)] });
        }
        let v = self.value(x);
        let mut out = vec![0.0; idx.len() * c];
        for (s, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out[s * c..(s + 1) * c].copy_from_slice(&v[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(idx.len() / slots, slots * c, Cow::Owned(out), Op::GatherSlots { x, idx: idx.to_vec() }, ng))
    }

    /// Inverted dropout. Identity on evaluation tapes.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        let Some(rng) = self.rng.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit mask (used for gradient checks).
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c, "dropout mask size");
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let ng = self.ng(x);
        self.push(r, c, Cow::Owned(out), Op::Dropout { x, mask }, ng)
    }

    /// Segment-wise softmax attention: for segment `p` spanning token rows
    /// `offsets[p]..offsets[p+1]`, returns `sum_i softmax(scores)_i * tokens_i`.
    /// Empty segments pool to zero.
    pub fn attention_pool(&mut self, tokens: NodeId, scores: NodeId, offsets: &[usize]) -> Result<NodeId> {
        let (t, d) = self.shape(tokens);
        let ok = self.shape(scores) == (t, 1)
            && !offsets.is_empty()
            && offsets[0] == 0
            && *offsets.last().unwrap() == t
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(self.shape_err("attention_pool", &[tokens, scores]));
        }
        let (e, s) = (self.value(tokens), self.value(scores));
        let p = offsets.len() - 1;
        let mut weights = vec![0.0; t];
        let mut out = vec![0.0; p * d];
        for seg in 0..p {
            let (lo, hi) = (offsets[seg], offsets[seg + 1]);
            if lo == hi {
                continue;
            }
            let m = s[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s[lo..hi].iter().map(|x| (x - m).exp()).sum();
            for i in lo..hi {
                let w = (s[i] - m).exp() / z;
                weights[i] = w;
                let row = &e[i * d..(i + 1) * d];
                for (o, x) in out[seg * d..(seg + 1) * d].iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(tokens) || self.ng(scores);
        Ok(self.push(p, d, Cow::Owned(out), Op::AttentionPool { tokens, scores, offsets: offsets.to_vec(), weights }, ng))
    }

    /// Mean cross-entropy of row-wise softmax against `targets`. With a
    /// mask, the softmax of each row is restricted to its `true` entries.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: Option<&[bool]>) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        let mask_ok = mask.is_none_or(|m| m.len() == r * c);
        if targets.len() != r || !mask_ok || targets.iter().any(|&t| t >= c) {
            return Err(Error::Shape { op: "softmax_cross_entropy", shapes: vec![(r, c), (targets.len(), 1)] });
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let valid = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            if !valid(targets[i]) {
                return Err(Error::Shape { op: "softmax_cross_entropy (masked target)", shapes: vec![(i, targets[i])] });
            }
            let m = (0..c).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).filter(|&j| valid(j)).map(|j| (row[j] - m).exp()).sum();
            for j in (0..c).filter(|&j| valid(j)) {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[targets[i]];
        }
        if r > 0 {
            loss /= r as f64;
        }
        let ng = self.ng(logits);
        Ok(self.push(1, 1, Cow::Owned(vec![loss]), Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(1, 1, Cow::Owned(vec![s]), Op::Sum(x), ng)
    }

    /// Accumulates d(loss)/d(param) into `grads` for every parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(self.shape_err("backward (non-scalar loss)", &[loss]));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        fn acc<'a>(g: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut Vec<f64> {
            let len = nodes[id.0].value.len();
            g[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let need = |id: NodeId| nodes[id.0].needs_grad;
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => grads.accumulate_dense(*pid, &gi),
                Op::Gather { param, rows } => {
                    let w = node.cols;
                    for (r, &row) in rows.iter().enumerate() {
                        grads.accumulate_row(*param, row, &gi[r * w..(r + 1) * w]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let n = nodes[b.0].cols;
                    if need(*a) {
                        let bv = &nodes[b.0].value;
                        let ga = acc(&mut g, nodes, *a);
                        gemm(m, n, k, &gi, false, bv, true, ga, 1.0);
                    }
                    if need(*b) {
                        let av = &nodes[a.0].value;
                        let gb = acc(&mut g, nodes, *b);
                        gemm(k, m, n, av, true, &gi, false, gb, 1.0);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if need(*a) {
                        let ga = acc(&mut g, nodes, *a);
                        ga.iter_mut().zip(&gi).for_each(|(x, y)| *x += y);
                    }
                    if need(*b) {
                        let sb = (nodes[b.0].rows, nodes[b.0].cols);
                        let gb = acc(&mut g, nodes, *b);
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                gb[bidx(r, c, sb)] += sign * gi[r * node.cols + c];
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let sb = (nodes[b.0].rows, nodes[b.0].cols);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if need(*a) {
                        let ga = acc(&mut g, nodes, *a);
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                ga[r * node.cols + c] += gi[r * node.cols + c] * bv[bidx(r, c, sb)];
                            }
                        }
                    }
                    if need(*b) {
                        let gb = acc(&mut g, nodes, *b);
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                let k = r * node.cols + c;
                                gb[bidx(r, c, sb)] += gi[k] * av[k];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut g, nodes, *a);
                    ga.iter_mut().zip(&gi).for_each(|(x, y)| *x += c * y);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p.0].cols;
                        if need(p) {
                            let gp = acc(&mut g, nodes, p);
                            for r in 0..node.rows {
                                let src = &gi[r * node.cols + off..r * node.cols + off + pc];
                                gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        if need(p) {
                            let gp = acc(&mut g, nodes, p);
                            gp.iter_mut().zip(&gi[off..off + len]).for_each(|(x, y)| *x += y);
                        }
                        off += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xc = nodes[x.0].cols;
                    let gx = acc(&mut g, nodes, *x);
                    for r in 0..node.rows {
                        let dst = &mut gx[r * xc + start..r * xc + start + node.cols];
                        dst.iter_mut().zip(&gi[r * node.cols..(r + 1) * node.cols]).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.cols;
                    let gx = acc(&mut g, nodes, *x);
                    gx[start * c..(start + node.rows) * c].iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                }
                Op::Sigmoid(x) | Op::Tanh(x) | Op::Relu(x) => {
                    let y = &node.value;
                    let gx = acc(&mut g, nodes, *x);
                    for k in 0..gi.len() {
                        let d = match node.op {
                            Op::Sigmoid(_) => y[k] * (1.0 - y[k]),
                            Op::Tanh(_) => 1.0 - y[k] * y[k],
                            _ => {
                                if y[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[k] += d * gi[k];
                    }
                }
                Op::Maxout { x, argmax } => {
                    let gx = acc(&mut g, nodes, *x);
                    for (k, &j) in argmax.iter().enumerate() {
                        gx[j] += gi[k];
                    }
                }
                Op::Window { x, radius } => {
                    let (r, c) = (nodes[x.0].rows, nodes[x.0].cols);
                    let width = 2 * radius + 1;
                    let gx = acc(&mut g, nodes, *x);
                    for i in 0..r {
                        for o in 0..width {
                            let j = i as isize + o as isize - *radius as isize;
                            if j >= 0 && (j as usize) < r {
                                let j = j as usize;
                                let src = &gi[i * c * width + o * c..i * c * width + (o + 1) * c];
                                gx[j * c..(j + 1) * c].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
                Op::GatherSlots { x, idx } => {
                    let c = nodes[x.0].cols;
                    let gx = acc(&mut g, nodes, *x);
                    for (s, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            gx[i * c..(i + 1) * c].iter_mut().zip(&gi[s * c..(s + 1) * c]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc(&mut g, nodes, *x);
                    for k in 0..gi.len() {
                        gx[k] += gi[k] * mask[k];
                    }
                }
                Op::AttentionPool { tokens, scores, offsets, weights } => {
                    let d = node.cols;
                    let e = &nodes[tokens.0].value;
                    let out = &node.value;
                    if need(*scores) {
                        let gs = acc(&mut g, nodes, *scores);
                        for seg in 0..offsets.len() - 1 {
                            let gp = &gi[seg * d..(seg + 1) * d];
                            let base: f64 = gp.iter().zip(&out[seg * d..(seg + 1) * d]).map(|(a, b)| a * b).sum();
                            for t in offsets[seg]..offsets[seg + 1] {
                                let dot: f64 = gp.iter().zip(&e[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum();
                                gs[t] += weights[t] * (dot - base);
                            }
                        }
                    }
                    if need(*tokens) {
                        let ge = acc(&mut g, nodes, *tokens);
                        for seg in 0..offsets.len() - 1 {
                            let gp = &gi[seg * d..(seg + 1) * d];
                            for t in offsets[seg]..offsets[seg + 1] {
                                let w = weights[t];
                                ge[t * d..(t + 1) * d].iter_mut().zip(gp).for_each(|(a, b)| *a += w * b);
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let r = targets.len();
                    if r == 0 {
                        continue;
                    }
                    let c = nodes[logits.0].cols;
                    let scale = gi[0] / r as f64;
                    let gl = acc(&mut g, nodes, *logits);
                    gl.iter_mut().zip(probs).for_each(|(a, p)| *a += scale * p);
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * c + t] -= scale;
                    }
                }
                Op::Sum(x) => {
                    let gx = acc(&mut g, nodes, *x);
                    gx.iter_mut().for_each(|a| *a += gi[0]);
                }
            }
        }
        Ok(())
    }
}
