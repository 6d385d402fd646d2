//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes are appended in execution order, so walking the
//! node list backwards is a reverse topological traversal.

use std::collections::HashMap;

use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequence layout for the fused attention kernel: `batch` sequences of
/// `seq` tokens each, stacked along the row axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        layout: AttentionLayout,
        probs: Vec<S>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Gather {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    bindings: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, p: &Parameter<S>) -> Var {
        if let Some(&v) = self.bindings.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, p.is_trainable());
        self.bindings.insert(p.id(), v);
        v
    }

    pub fn binding(&self, p: &Parameter<S>) -> Option<Var> {
        self.bindings.get(&p.id()).copied()
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`w` vector to every row of a `…×w` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let w = vx.width();
        if vb.len() != w {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % w])
            .collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row-wise layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        let vx = self.value(x);
        let d = vx.width();
        for v in [gamma, beta] {
            if self.value(v).len() != d {
                return Err(Error::shape("layer_norm", vx.shape(), self.value(v).shape()));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.rows();
        let dn = S::of(d as f64);
        let mut xhat = vec![S::zero(); vx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let w = vx.width();
        let mut out = vec![S::zero(); vx.len()];
        for r in 0..vx.rows() {
            softmax_into(vx.row(r), &mut out[r * w..(r + 1) * w]);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Fused multi-head scaled dot-product attention core.
    ///
    /// `qkv` holds the projected queries, keys and values side by side,
    /// `[batch·seq × 3d]`. Returns the concatenated head outputs `[batch·seq × d]`
    /// before the output projection.
    pub fn attention(&mut self, qkv: Var, layout: AttentionLayout) -> Result<Var> {
        let AttentionLayout {
            batch,
            seq,
            heads,
            causal,
        } = layout;
        let vq = self.value(qkv);
        let w3 = vq.width();
        if vq.rank() != 2 || !w3.is_multiple_of(3) || vq.rows() != batch * seq {
            return Err(Error::shape("attention", vq.shape(), &[batch * seq, w3]));
        }
        let d = w3 / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let src = vq.data();
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * d];
        let mut scores = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &src[(b * seq + i) * w3 + h * dh..][..dh];
                    let visible = if causal { i + 1 } else { seq };
                    for j in 0..visible {
                        let krow = &src[(b * seq + j) * w3 + d + h * dh..][..dh];
                        let dot: S = qrow.iter().zip(krow).map(|(&q, &k)| q * k).sum();
                        scores[j] = dot * scale;
                    }
                    let prow = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                    softmax_into(&scores[..visible], &mut prow[..visible]);
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        let p = prow[j];
                        let vrow = &src[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                        for (o, &v) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * v;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![batch * seq, d], out);
        let rg = self.rg(qkv);
        Ok(self.push(t, Op::Attention { qkv, layout, probs }, rg))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, shaped
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<S>> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some(Tensor::from_parts(
                vec![layout.batch, layout.heads, layout.seq, layout.seq],
                probs.clone(),
            )),
            _ => None,
        }
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.width();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vec![S::zero(); vx.len()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if n == S::zero() {
                return Err(Error::Contract("cannot normalize a zero vector".into()));
            }
            norms.push(n);
            for j in 0..w {
                out[r * w + j] = row[j] / n;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.require_matrix("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", &[b, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let vl = self.value(logits);
        let mut probs = vec![S::zero(); b * k];
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + (lse - row[label]);
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / S::of(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Builds a matrix whose rows are copied from rows of `sources`;
    /// `index[r] = (source, row)`. Concatenation, slicing, insertion and
    /// embedding lookup are all expressed through this.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::Contract("gather_rows needs at least one source".into()))?;
        if index.is_empty() {
            return Err(Error::Contract("gather_rows produced no rows".into()));
        }
        let w = self.value(first).width();
        for &s in sources {
            if self.value(s).width() != w {
                return Err(Error::shape(
                    "gather_rows",
                    self.value(first).shape(),
                    self.value(s).shape(),
                ));
            }
        }
        let mut out = Vec::with_capacity(index.len() * w);
        for &(s, r) in index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Index(format!("gather source {s} out of range")))?;
            let t = self.value(*src);
            if r >= t.rows() {
                return Err(Error::Index(format!(
                    "gather row {r} out of range for {} rows",
                    t.rows()
                )));
            }
            out.extend_from_slice(t.row(r));
        }
        let t = Tensor::from_parts(vec![index.len(), w], out);
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            t,
            Op::Gather {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            index.extend((0..self.value(p).rows()).map(|r| (s, r)));
        }
        self.gather_rows(parts, &index)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<_> = (start..end).map(|r| (0, r)).collect();
        self.gather_rows(&[x], &index)
    }

    /// Runs reverse accumulation from a scalar root. A graph supports exactly
    /// one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    /// Gradient for a bound parameter; zeros when the root does not depend on it.
    pub fn param_grad(&self, p: &Parameter<S>) -> Tensor<S> {
        self.binding(p)
            .and_then(|v| self.grad(v))
            .unwrap_or_else(|| Tensor::zeros(p.value().shape()))
    }

    fn backprop_node(&self, idx: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    S::gemm(m, n, k, S::one(), gout, n as isize, 1, vb.data(), 1, n as isize, S::one(), ga);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    S::gemm(k, m, n, S::one(), va.data(), 1, k as isize, gout, n as isize, 1, S::one(), gb);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let s = self.value(*a).shape();
                    let (r, c) = (s[0], s[1]);
                    let ga = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + gout[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(slot(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    add_into(slot(grads, *x, gout.len()), gout);
                }
                if self.rg(*bias) {
                    let w = self.value(*bias).len();
                    let gb = slot(grads, *bias, w);
                    for (i, &g) in gout.iter().enumerate() {
                        gb[i % w] = gb[i % w] + g;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = slot(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] = ga[i] + gout[i] * vb[i];
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        gb[i] = gb[i] + gout[i] * va[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let gx = slot(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        gx[i] = gx[i] + gout[i] * *c;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x).data();
                    let gx = slot(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        gx[i] = gx[i] + gout[i] * gelu_grad(vx[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    for g in gx.iter_mut() {
                        *g = *g + gout[0];
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
                let d = self.value(*gamma).len();
                let rows = xhat.len() / d;
                let g = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = slot(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + gout[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dn = S::of(d as f64);
                    let gx = slot(grads, *x, rows * d);
                    for r in 0..rows {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..d {
                            let dh = gout[r * d + j] * g[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = gout[r * d + j] * g[j];
                            let h = xhat[r * d + j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let w = node.value.width();
                    let gx = slot(grads, *x, y.len());
                    for r in 0..y.len() / w {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &gout[r * w..(r + 1) * w];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            gx[r * w + j] = gx[r * w + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { qkv, layout, probs } => {
                if self.rg(*qkv) {
                    self.attention_backward(*qkv, *layout, probs, gout, grads);
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let w = node.value.width();
                    let gx = slot(grads, *x, y.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &gout[r * w..(r + 1) * w];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            gx[r * w + j] = gx[r * w + j] + (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.rg(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = gout[0] / S::of(b as f64);
                    let gl = slot(grads, *logits, b * k);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            gl[r * k + j] = gl[r * k + j] + scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Gather { sources, index } => {
                let w = node.value.width();
                for (s, &src) in sources.iter().enumerate() {
                    if !self.rg(src) {
                        continue;
                    }
                    let n = self.value(src).len();
                    let gs = slot(grads, src, n);
                    for (out_row, &(si, r)) in index.iter().enumerate() {
                        if si == s {
                            add_into(&mut gs[r * w..(r + 1) * w], &gout[out_row * w..(out_row + 1) * w]);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        layout: AttentionLayout,
        probs: &[S],
        gout: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let AttentionLayout {
            batch,
            seq,
            heads,
            causal,
        } = layout;
        let src = self.value(qkv).data();
        let w3 = self.value(qkv).width();
        let d = w3 / 3;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let gq = slot(grads, qkv, src.len());
        let mut dp = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let visible = if causal { i + 1 } else { seq };
                    let prow = &probs[p_off + i * seq..p_off + i * seq + visible];
                    let go = &gout[(b * seq + i) * d + h * dh..][..dh];
                    // dP_ij = dO_i · V_j and dV_j += P_ij dO_i
                    for j in 0..visible {
                        let vrow = &src[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(&g, &v)| g * v).sum();
                        let gv = &mut gq[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                        for (acc, &g) in gv.iter_mut().zip(go) {
                            *acc = *acc + prow[j] * g;
                        }
                    }
                    let dot: S = prow.iter().zip(&dp[..visible]).map(|(&p, &g)| p * g).sum();
                    for j in 0..visible {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let q_off = (b * seq + i) * w3 + h * dh;
                        let k_off = (b * seq + j) * w3 + d + h * dh;
                        for t in 0..dh {
                            let kv = src[k_off + t];
                            let qv = src[q_off + t];
                            gq[q_off + t] = gq[q_off + t] + ds * kv;
                            gq[k_off + t] = gq[k_off + t] + ds * qv;
                        }
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn softmax_into<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}
