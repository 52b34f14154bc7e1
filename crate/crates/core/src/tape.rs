//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; node order is
//! a topological order, so [`Tape::gradients`] walks the tape backwards once.
//! Nodes whose inputs are all constant or frozen carry `needs_grad = false`
//! and are skipped entirely during the backward sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::tensor::check_shape;
use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    CausalMask(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of numpy-style broadcasting, if compatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the flat index of the element of
/// `in_shape` it reads under broadcasting.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + pad] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Rank(n.shape.len(), n.value.len()));
        }
        Ok(n.value[0])
    }

    /// Adds a tensor as a leaf; it is differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, t.requires_grad())
    }

    /// Adds a tensor as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        );
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::Shape(format!("cannot broadcast {sa:?} + {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| x + y).collect()
        } else if out_shape == sa && sa.ends_with(&sb) {
            let w = vb.len();
            va.chunks(w).flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x + y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| va[i] + vb[j]).collect()
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out_shape, out, Op::Add(a, b), ng))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} ⊙ {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape(format!("reshape {:?} → {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    /// Concatenation along `axis`; other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidInput("empty concat".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index { axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::Shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Index { axis, rank: s.len() });
        }
        if len == 0 || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{} of extent {}", start + len, s[axis])));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Slice { input: a, axis, start }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.iter().copied().sum::<T>() / T::cast(v.len() as f64);
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::cast(GELU_C), T::cast(GELU_A));
        let half = T::cast(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Index { axis, rank: s.len() });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| v[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (v[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(s, out, Op::Softmax { input: a, axis }, ng))
    }

    /// Per-row standardization over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {s:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::cast(eps);
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = v.len() / d;
        let dn = T::cast(d as f64);
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(s, out, Op::LayerNorm { input: x, gamma, beta, xhat, rstd }, ng))
    }

    /// Row lookup: `ids.len() × d` from a `vocab × d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table of shape {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Mean negative log-likelihood over the rows of `logits` whose target
    /// is `Some`. `targets.len()` must equal the row count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!("cross_entropy over {s:?} with {} targets", targets.len())));
        }
        let (rows, vocab) = (s[0], s[1]);
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::InvalidInput(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::DegenerateLoss);
        }
        let v = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &v[r * vocab..(r + 1) * vocab];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            probs[r * vocab..(r + 1) * vocab].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + m - row[t];
        }
        let loss = total / T::cast(count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
        ))
    }

    /// Sets entries above the diagonal of the trailing `L×L` block to −∞.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(Error::Shape(format!("causal mask needs square trailing block, got {s:?}")));
        }
        let l = s[r - 1];
        let mut out = self.value(a).to_vec();
        for block in out.chunks_mut(l * l) {
            for i in 0..l {
                for j in i + 1..l {
                    block[i * l + j] = T::neg_infinity();
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(s, out, Op::CausalMask(a), ng))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that needs one; nothing is written to any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Rank(root.shape.len(), root.value.len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if root.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// [`Tape::gradients`], then accumulates into every trainable parameter
    /// leaf. Frozen parameters are never written.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[idx] {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [T])| {
            if !self.ng(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &|ga| gemm_nt(m, n, k, g, vb, ga));
                acc(*b, &|gb| gemm_tn(m, k, n, va, g, gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let s = self.shape(v);
                    if s == node.shape.as_slice() {
                        acc(v, &|gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                    } else {
                        let map = broadcast_map(&node.shape, s);
                        acc(v, &|gv| {
                            for (&j, &y) in map.iter().zip(g) {
                                gv[j] += y;
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &|ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                });
                acc(*b, &|gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)),
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    acc(p, &|gp| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            gp[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*input), *axis);
                let len = node.shape[*axis] * inner;
                acc(*input, &|gi| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        gi[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let d = g[0] / T::cast(self.value(*a).len() as f64);
                acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += d));
            }
            Op::Gelu(a) => {
                let (c, k) = (T::cast(GELU_C), T::cast(GELU_A));
                let half = T::cast(0.5);
                let three = T::cast(3.0);
                let va = self.value(*a);
                acc(*a, &|ga| {
                    for ((x, &y), &u) in ga.iter_mut().zip(g).zip(va) {
                        let t = (c * (u + k * u * u * u)).tanh();
                        let d = half * (T::one() + t)
                            + half * u * (T::one() - t * t) * c * (T::one() + three * k * u * u);
                        *x += y * d;
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*input, &|gi| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gi[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gv = self.value(*gamma);
                acc(*gamma, &|gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &|gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                let dn = T::cast(d as f64);
                acc(*input, &|gx| {
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / T::cast(*count as f64);
                acc(*logits, &|gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            gl[r * vocab + j] += scale * probs[r * vocab + j];
                        }
                        gl[r * vocab + t] -= scale;
                    }
                });
            }
            Op::CausalMask(a) => {
                let l = *node.shape.last().unwrap();
                acc(*a, &|ga| {
                    for (b, gb) in ga.chunks_mut(l * l).enumerate() {
                        for i in 0..l {
                            for j in 0..=i {
                                gb[i * l + j] += g[b * l * l + i * l + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `∂loss/∂v`, or `None` when `v` does not need a gradient or does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into a standalone tensor. Frozen
    /// tensors are left untouched.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Init, RngState};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_reference() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).iter().all(|p| p.is_finite()));
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(matches!(tape.softmax(x, 1), Err(Error::Index { axis: 1, rank: 1 })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = RngState::new(5);
        let x = Tensor::<f32>::seeded_init(&[4, 5], Init::UniformScaled, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(&t(&[2], &[1.0, 1.0]));
        let b = tape.constant(&t(&[2], &[0.0, 0.0]));
        let x = tape.constant(&t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);
        let bad = tape.constant(&t(&[3], &[1.0, 1.0, 1.0]));
        assert!(matches!(tape.layer_norm(x, bad, b, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_random_row_is_standardized() {
        let mut rng = RngState::new(9);
        let row: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::from_vec(&[1, 64], row).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let g = tape.constant(&Tensor::full(&[64], 1.0).unwrap());
        let b = tape.constant(&Tensor::zeros(&[64]).unwrap());
        let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / 64.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.gradients(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.gradients(xv), Err(Error::Rank(1, 2))));
    }

    #[test]
    fn frozen_param_grad_slot_stays_absent() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngState::new(3);
        let w = store.init("w", &[2, 2], Init::UniformScaled, &mut rng, false).unwrap();
        let x = store.init("x", &[1, 2], Init::UniformScaled, &mut rng, true).unwrap();
        let mut tape = Tape::new();
        let (wv, xv) = (tape.param(&store, w), tape.param(&store, x));
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(w).grad().is_none());
        assert!(store.get(x).grad().is_some());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut store = ParamStore::<f64>::new();
        let x = store.insert("x", t(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.param(&store, x);
            let loss = tape.sum(xv);
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(x).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grads();
        assert!(store.get(x).grad().is_none());
    }

    #[test]
    fn broadcast_add_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.constant(&t(&[2, 1, 1], &[10.0, 20.0]));
        let y = tape.add(x, p).unwrap();
        assert_eq!(tape.value(y), &[11.0, 12.0, 23.0, 24.0]);
        let bad = tape.constant(&t(&[2, 3, 1], &[0.0; 6]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(&Tensor::zeros(&[3, 7]).unwrap());
        let loss = tape.cross_entropy(l, &[Some(1), None, Some(6)]).unwrap();
        assert!((tape.scalar(loss).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(l, &[None, None, None]), Err(Error::DegenerateLoss)));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[3, 3]).unwrap());
        let m = tape.causal_mask(x).unwrap();
        let p = tape.softmax(m, 1).unwrap();
        let v = tape.value(p);
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-15 && v[5] == 0.0);
    }
}
