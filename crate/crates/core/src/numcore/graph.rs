//! A small reverse-mode tape covering the operations the encoders, the
//! contrastive losses and the recognition head are built from.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Each backward rule reuses values cached on the
//! forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{
    dot, layer_norm_raw, log_softmax_in_place, matmul_nt_raw, matmul_raw, matmul_tn_raw, norm,
    softmax_in_place,
};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a b^T`
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    /// Broadcasts a `[d]` bias over the last axis.
    AddBias(Var, Var),
    Scale(Var, f64),
    /// Divides every entry by a single-element tensor.
    DivScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        bias: Var,
    },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    NormalizeLast {
        x: Var,
        norms: Vec<f64>,
    },
    EmbedMean {
        table: Var,
        seqs: Arc<Vec<Vec<u32>>>,
    },
    /// `[B,C,M] x [C,M,D] -> [B,C,D]`
    AttendGather(Var, Var),
    /// `[B,D] x [B,C,D] -> [B,C]`
    RowDot(Var, Var),
    LnFloor(Var, f64),
    /// Max over consecutive groups of the last axis; remembers the winners.
    GroupMax {
        x: Var,
        winners: Vec<usize>,
    },
    /// Scalar `sum(x * w)` against a fixed weight array.
    WeightedSum(Var, Arc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input. The tensor's value is copied onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        self.push(value, Op::Leaf, true)
    }

    /// A value no gradient is propagated into.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.push(t, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (m, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulNT(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let t = self.tracked(a);
        Ok(self.push(out, Op::Transpose(a), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let t = self.tracked(a);
        Ok(self.push(out, Op::Reshape(a), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().expect("rank >= 1");
        if vb.shape() != [d] {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_exact_mut(d) {
            for (v, b) in chunk.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let t = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddBias(x, bias), t))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * k).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::Scale(x, k), t)
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(Error::shape("div_scalar", self.shape(x), vs.shape()));
        }
        let sv = vs.item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v / sv).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let t = self.tracked(x) || self.tracked(s);
        Ok(self.push(out, Op::DivScalar(x, s), t))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::Tanh(x), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::Relu(x), t)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gain)));
        }
        let (y, xhat, rstd) = layer_norm_raw(
            vx.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            eps,
        );
        let out = Tensor::new(vx.shape(), y)?;
        let t = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            },
            t,
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank >= 1");
        let mut data = vx.data().to_vec();
        data.chunks_exact_mut(d).for_each(softmax_in_place);
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::SoftmaxLast(x), t)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank >= 1");
        let mut data = vx.data().to_vec();
        data.chunks_exact_mut(d).for_each(log_softmax_in_place);
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::LogSoftmaxLast(x), t)
    }

    /// L2-normalises every slice along the last axis.
    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank >= 1");
        let norms: Vec<f64> = vx.data().chunks_exact(d).map(norm).collect();
        let out = super::ops::normalize_rows_raw(vx.data(), d, 0)?;
        let out = Tensor::new(vx.shape(), out)?;
        let t = self.tracked(x);
        Ok(self.push(out, Op::NormalizeLast { x, norms }, t))
    }

    /// Cosine similarity of every row of `a` against every row of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows_a = self.value(a).dims2()?.0;
        let an = self.normalize_last(a)?;
        let bn = self.normalize_last(b).map_err(|e| match e {
            Error::ZeroNorm { row } => Error::ZeroNorm { row: row + rows_a },
            other => other,
        })?;
        self.matmul_nt(an, bn)
    }

    /// Mean of the embedding-table rows selected by each token sequence.
    pub fn embed_mean(&mut self, table: Var, seqs: Arc<Vec<Vec<u32>>>) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        let tab = self.value(table).data();
        let mut out = vec![0.0; seqs.len() * d];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidArgument(format!("sequence {i} is empty")));
            }
            let row = &mut out[i * d..(i + 1) * d];
            for &tok in seq {
                let tok = tok as usize;
                if tok >= vocab {
                    return Err(Error::InvalidArgument(format!(
                        "token {tok} outside vocabulary of {vocab}"
                    )));
                }
                for (o, v) in row.iter_mut().zip(&tab[tok * d..(tok + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / seq.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(&[seqs.len(), d], out)?;
        let t = self.tracked(table);
        Ok(self.push(out, Op::EmbedMean { table, seqs }, t))
    }

    /// For every batch row and class, the attention-weighted sum of that
    /// class's value rows.
    pub fn attend_gather(&mut self, attn: Var, values: Var) -> Result<Var> {
        let (va, vv) = (self.value(attn), self.value(values));
        let (b, c, m, d) = match (va.shape(), vv.shape()) {
            (&[b, c, m], &[c2, m2, d]) if c == c2 && m == m2 => (b, c, m, d),
            _ => return Err(Error::shape("attend_gather", va.shape(), vv.shape())),
        };
        let (a, v) = (va.data(), vv.data());
        let mut out = vec![0.0; b * c * d];
        for bi in 0..b {
            for ci in 0..c {
                let o = &mut out[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                for mi in 0..m {
                    let w = a[(bi * c + ci) * m + mi];
                    let vrow = &v[(ci * m + mi) * d..(ci * m + mi + 1) * d];
                    for (x, y) in o.iter_mut().zip(vrow) {
                        *x += w * y;
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, d], out)?;
        let t = self.tracked(attn) || self.tracked(values);
        Ok(self.push(out, Op::AttendGather(attn, values), t))
    }

    /// `out[b,c] = <a[b,:], g[b,c,:]>`
    pub fn row_dot(&mut self, a: Var, g: Var) -> Result<Var> {
        let (va, vg) = (self.value(a), self.value(g));
        let (b, c, d) = match (va.shape(), vg.shape()) {
            (&[b, d], &[b2, c, d2]) if b == b2 && d == d2 => (b, c, d),
            _ => return Err(Error::shape("row_dot", va.shape(), vg.shape())),
        };
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let arow = &va.data()[bi * d..(bi + 1) * d];
            for ci in 0..c {
                out[bi * c + ci] = dot(arow, &vg.data()[(bi * c + ci) * d..(bi * c + ci + 1) * d]);
            }
        }
        let out = Tensor::new(&[b, c], out)?;
        let t = self.tracked(a) || self.tracked(g);
        Ok(self.push(out, Op::RowDot(a, g), t))
    }

    /// Splits the last axis into groups of `group` and keeps each group's
    /// maximum (first index on ties). `[.., K*group] -> [.., K]`.
    pub fn group_max_last(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        let last = *vx.shape().last().expect("rank >= 1");
        if group == 0 || !last.is_multiple_of(group) {
            return Err(Error::shape("group_max_last", vx.shape(), &[group]));
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = last / group;
        let mut out = Vec::with_capacity(vx.len() / group);
        let mut winners = Vec::with_capacity(vx.len() / group);
        for (gi, chunk) in vx.data().chunks_exact(group).enumerate() {
            let k = super::ops::argmax(chunk);
            out.push(chunk[k]);
            winners.push(gi * group + k);
        }
        let out = Tensor::new(&shape, out)?;
        let t = self.tracked(x);
        Ok(self.push(out, Op::GroupMax { x, winners }, t))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(floor).ln()).collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let t = self.tracked(x);
        self.push(out, Op::LnFloor(x, floor), t)
    }

    /// Scalar `sum(x * w)`.
    pub fn weighted_sum(&mut self, x: Var, w: Arc<Vec<f64>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != w.len() {
            return Err(Error::shape("weighted_sum", vx.shape(), &[w.len()]));
        }
        let s = dot(vx.data(), &w);
        let t = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), t))
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                root.shape()
            )));
        }
        if !root.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", root.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.tracked(*a) {
                    self.accumulate(grads, *a, matmul_nt_raw(gy, vb.data(), n, m, k));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn_raw(va.data(), gy, n, k, m));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[0];
                if self.tracked(*a) {
                    self.accumulate(grads, *a, matmul_raw(gy, vb.data(), n, m, k));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn_raw(gy, va.data(), n, m, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = gy[i * c + j];
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gy.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gy.to_vec());
                if self.tracked(*b) {
                    let d = self.value(*b).len();
                    let mut gb = vec![0.0; d];
                    for chunk in gy.chunks_exact(d) {
                        gb.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, gy.iter().map(|g| g * k).collect()),
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                self.accumulate(grads, *x, gy.iter().map(|g| g / sv).collect());
                if self.tracked(*s) {
                    let xs = self.value(*x).data();
                    let gs = -dot(gy, xs) / (sv * sv);
                    self.accumulate(grads, *s, vec![gs]);
                }
            }
            Op::Tanh(x) => {
                let g = gy
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let g = gy
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.tracked(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gyr = &gy[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gyr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.tracked(*gain) || self.tracked(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (gyr, xh) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gyr[j] * xh[j];
                            gb[j] += gyr[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::SoftmaxLast(x) => {
                let d = *y.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; gy.len()];
                for ((gr, yr), out) in gy
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.chunks_exact_mut(d))
                {
                    let s = dot(gr, yr);
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LogSoftmaxLast(x) => {
                let d = *y.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; gy.len()];
                for ((gr, yr), out) in gy
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.chunks_exact_mut(d))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::GroupMax { x, winners } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (w, gv) in winners.iter().zip(gy) {
                    g[*w] += gv;
                }
                self.accumulate(grads, *x, g);
            }
            Op::NormalizeLast { x, norms } => {
                let d = *y.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; gy.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let s = dot(yr, gr);
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - yr[j] * s) / n;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::EmbedMean { table, seqs } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut g = vec![0.0; vt.len()];
                for (i, seq) in seqs.iter().enumerate() {
                    let inv = 1.0 / seq.len() as f64;
                    let gr = &gy[i * d..(i + 1) * d];
                    for &tok in seq {
                        let row = &mut g[tok as usize * d..(tok as usize + 1) * d];
                        row.iter_mut().zip(gr).for_each(|(a, v)| *a += v * inv);
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::AttendGather(attn, values) => {
                let (va, vv) = (self.value(*attn), self.value(*values));
                let (b, c, m) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let d = vv.shape()[2];
                if self.tracked(*attn) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gr = &gy[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                            for mi in 0..m {
                                let vrow = &vv.data()[(ci * m + mi) * d..(ci * m + mi + 1) * d];
                                ga[(bi * c + ci) * m + mi] = dot(gr, vrow);
                            }
                        }
                    }
                    self.accumulate(grads, *attn, ga);
                }
                if self.tracked(*values) {
                    let mut gv = vec![0.0; vv.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gr = &gy[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                            for mi in 0..m {
                                let w = va.data()[(bi * c + ci) * m + mi];
                                let row = &mut gv[(ci * m + mi) * d..(ci * m + mi + 1) * d];
                                row.iter_mut().zip(gr).for_each(|(a, v)| *a += w * v);
                            }
                        }
                    }
                    self.accumulate(grads, *values, gv);
                }
            }
            Op::RowDot(a, gvar) => {
                let (va, vg) = (self.value(*a), self.value(*gvar));
                let (b, d) = (va.shape()[0], va.shape()[1]);
                let c = vg.shape()[1];
                if self.tracked(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..b {
                        let row = &mut ga[bi * d..(bi + 1) * d];
                        for ci in 0..c {
                            let w = gy[bi * c + ci];
                            let grow = &vg.data()[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                            row.iter_mut().zip(grow).for_each(|(x, v)| *x += w * v);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*gvar) {
                    let mut gg = vec![0.0; vg.len()];
                    for bi in 0..b {
                        let arow = &va.data()[bi * d..(bi + 1) * d];
                        for ci in 0..c {
                            let w = gy[bi * c + ci];
                            let row = &mut gg[(bi * c + ci) * d..(bi * c + ci + 1) * d];
                            row.iter_mut().zip(arow).for_each(|(x, v)| *x = w * v);
                        }
                    }
                    self.accumulate(grads, *gvar, gg);
                }
            }
            Op::LnFloor(x, floor) => {
                let xs = self.value(*x).data();
                let g = gy
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| if *v > *floor { g / v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::WeightedSum(x, w) => {
                let g0 = gy[0];
                self.accumulate(grads, *x, w.iter().map(|v| v * g0).collect());
            }
        }
    }
}
