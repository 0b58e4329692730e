//! Reverse-mode differentiation over a recorded forward graph.
//!
//! A [`GradTape`] stores every intermediate value in recording order, so node
//! inputs always precede the node. [`GradTape::backward`] walks the nodes in
//! reverse once and returns an adjoint for every node that depends on a leaf
//! marked `requires_grad`.
//!
//! The tape also tallies multiply-accumulates per primitive as it records.
//! A tape built with [`GradTape::counting`] tracks shapes and MACs only and
//! skips all arithmetic, which lets the cost model instrument shapes far too
//! large to run.

use std::collections::BTreeMap;

use super::kernels::{self, Dims5};
use super::{DType, Matrix, Shape5, VideoFeature};
use crate::error::{PnlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate tally, keyed by primitive name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    total: u128,
    by_op: BTreeMap<&'static str, u128>,
}

impl MacCounter {
    pub fn add(&mut self, op: &'static str, macs: u128) {
        self.total += macs;
        *self.by_op.entry(op).or_default() += macs;
    }

    pub fn total(&self) -> u128 {
        self.total
    }

    pub fn by_op(&self) -> &BTreeMap<&'static str, u128> {
        &self.by_op
    }

    /// Folds another counter (e.g. from a parallel branch) into this one.
    pub fn merge(&mut self, other: &MacCounter) {
        self.total += other.total;
        for (k, v) in &other.by_op {
            *self.by_op.entry(k).or_default() += v;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    ChannelLinear { x: Var, w: Var },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax { x: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Add { a: Var, b: Var },
    AvgPool { x: Var, factor: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    SliceChannels { x: Var, start: usize, len: usize },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    MeanPositions { x: Var },
    PairwiseConcat { theta: Var, phi: Var, wf: Var },
    Unfold3x3 { x: Var, stride: usize },
    AddBias { x: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct GradTape {
    nodes: Vec<Node>,
    dtype: DType,
    counting_only: bool,
    macs: MacCounter,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims5(shape: &[usize]) -> Result<Dims5> {
    shape
        .try_into()
        .map_err(|_| PnlError::shape(format!("expected a rank-5 tensor, got shape {shape:?}")))
}

impl GradTape {
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    /// Values produced on this tape are rounded to `dtype` after every op.
    pub fn with_dtype(dtype: DType) -> Self {
        GradTape {
            nodes: Vec::new(),
            dtype,
            counting_only: false,
            macs: MacCounter::default(),
        }
    }

    /// Shape-and-MAC tracking only; no values are computed.
    pub fn counting() -> Self {
        GradTape {
            counting_only: true,
            ..Self::new()
        }
    }

    pub fn is_counting_only(&self) -> bool {
        self.counting_only
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn feature(&self, v: Var) -> Result<VideoFeature> {
        let shape = Shape5::from_dims(self.shape(v))?;
        if self.counting_only {
            return Err(PnlError::config("counting-only tape holds no values"));
        }
        Ok(VideoFeature::from_parts(shape, self.dtype, self.value(v).to_vec()))
    }

    fn push(&mut self, shape: Vec<usize>, mut value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if !self.counting_only {
            debug_assert_eq!(value.len(), numel(&shape));
            self.dtype.round_all(&mut value);
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn compute<F: FnOnce() -> Vec<f64>>(&self, f: F) -> Vec<f64> {
        if self.counting_only {
            Vec::new()
        } else {
            f()
        }
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if !self.counting_only && data.len() != numel(shape) {
            return Err(PnlError::shape(format!(
                "leaf data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        let v = self.push(shape.to_vec(), data, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    pub fn input(&mut self, x: &VideoFeature, requires_grad: bool) -> Var {
        let data = self.compute(|| x.data().to_vec());
        self.leaf(&x.shape().dims(), data, requires_grad)
            .expect("feature length matches its shape")
    }

    /// Leaf with the given shape; in counting mode no data is needed.
    pub fn shaped_input(&mut self, shape: Shape5) -> Var {
        let data = self.compute(|| vec![0.0; shape.numel()]);
        self.leaf(&shape.dims(), data, false).expect("zero fill matches shape")
    }

    pub fn matrix(&mut self, m: &Matrix, requires_grad: bool) -> Var {
        let data = self.compute(|| m.data().to_vec());
        self.leaf(&[m.rows(), m.cols()], data, requires_grad)
            .expect("matrix length matches its dims")
    }

    pub fn vector(&mut self, v: &[f64], requires_grad: bool) -> Var {
        let data = self.compute(|| v.to_vec());
        self.leaf(&[v.len()], data, requires_grad).expect("vector length")
    }

    /// `x[..., cin] · w[cin, cout]`.
    pub fn channel_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != cin {
            return Err(PnlError::shape(format!(
                "channel_linear: input {xs:?} against weight {ws:?}"
            )));
        }
        let cout = ws[1];
        let rows = numel(&xs) / cin;
        self.macs.add("channel_linear", rows as u128 * cin as u128 * cout as u128);
        let value = self.compute(|| kernels::matmul(self.value(x), self.value(w), rows, cin, cout));
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(shape, value, Op::ChannelLinear { x, w }, &[x, w]))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || PnlError::shape(format!("bmm: {sa:?} by {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        self.macs.add("matmul", batch as u128 * m as u128 * k as u128 * n as u128);
        let value = self.compute(|| {
            let (av, bv) = (self.value(a), self.value(b));
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                if trans_b {
                    out.extend(kernels::matmul_bt(ai, bi, m, k, n));
                } else {
                    out.extend(kernels::matmul(ai, bi, m, k, n));
                }
            }
            out
        });
        let op = Op::BatchMatMul { a, b, batch, m, k, n, trans_b };
        Ok(self.push(vec![batch, m, n], value, op, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let value = self.compute(|| kernels::softmax_rows(self.value(x), cols));
        self.push(shape, value, Op::Softmax { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.compute(|| self.value(x).iter().map(|v| v * factor).collect());
        self.push(shape, value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.compute(|| {
            self.value(x)
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect()
        });
        self.push(shape, value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(PnlError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let value = self.compute(|| {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| x + y)
                .collect()
        });
        Ok(self.push(shape, value, Op::Add { a, b }, &[a, b]))
    }

    fn pooled(&self, x: Var, factor: usize) -> Result<(Dims5, Vec<usize>)> {
        let d = dims5(self.shape(x))?;
        if factor == 0 || !factor.is_power_of_two() || d[2] % factor != 0 || d[3] % factor != 0 {
            return Err(PnlError::config(format!(
                "pool factor {factor} does not divide spatial dims {}x{}",
                d[2], d[3]
            )));
        }
        Ok((d, vec![d[0], d[1], d[2] / factor, d[3] / factor, d[4]]))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (d, shape) = self.pooled(x, factor)?;
        let value = self.compute(|| kernels::avg_pool(self.value(x), &d, factor));
        Ok(self.push(shape, value, Op::AvgPool { x, factor }, &[x]))
    }

    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (d, shape) = self.pooled(x, factor)?;
        let (value, argmax) = if self.counting_only {
            (Vec::new(), Vec::new())
        } else {
            kernels::max_pool(self.value(x), &d, factor)
        };
        Ok(self.push(shape, value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let d = dims5(self.shape(x))?;
        if factor == 0 || !factor.is_power_of_two() {
            return Err(PnlError::config(format!("upsample factor {factor} is not a power of two")));
        }
        let shape = vec![d[0], d[1], d[2] * factor, d[3] * factor, d[4]];
        let value = self.compute(|| kernels::upsample(self.value(x), &d, factor));
        Ok(self.push(shape, value, Op::Upsample { x, factor }, &[x]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if len == 0 || start + len > c {
            return Err(PnlError::shape(format!(
                "slice_channels [{start}, {}) of {c} channels",
                start + len
            )));
        }
        let value = self.compute(|| kernels::slice_cols(self.value(x), c, start, len));
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, value, Op::SliceChannels { x, start, len }, &[x]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PnlError::shape("concat of an empty list"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(PnlError::shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(*first),
                    s
                )));
            }
        }
        let rows = numel(lead);
        let mut shape = lead.to_vec();
        shape.push(parts.iter().map(|p| *self.shape(*p).last().unwrap()).sum());
        let value = self.compute(|| {
            let slices: Vec<(&[f64], usize)> = parts
                .iter()
                .map(|p| (self.value(*p), *self.shape(*p).last().unwrap()))
                .collect();
            kernels::concat_cols(&slices, rows)
        });
        Ok(self.push(shape, value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(PnlError::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.compute(|| self.value(x).to_vec());
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, &[x]))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(PnlError::shape(format!("permute {xs:?} by {perm:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let value = self.compute(|| permute_data(self.value(x), &xs, perm));
        Ok(self.push(shape, value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Mean over every axis between the first (batch) and the last (channels).
    pub fn mean_positions(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(PnlError::shape(format!("mean_positions needs rank >= 3, got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[xs.len() - 1]);
        let p = numel(&xs) / (b * c);
        let value = self.compute(|| {
            let v = self.value(x);
            let mut out = vec![0.0; b * c];
            for bi in 0..b {
                let o = &mut out[bi * c..(bi + 1) * c];
                for pi in 0..p {
                    let row = &v[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                    for (acc, r) in o.iter_mut().zip(row) {
                        *acc += r;
                    }
                }
                for acc in o.iter_mut() {
                    *acc /= p as f64;
                }
            }
            out
        });
        Ok(self.push(vec![b, c], value, Op::MeanPositions { x }, &[x]))
    }

    /// Pre-activation of the concatenation pairwise function:
    /// `s[b,i,j] = w_f[..e]·θ[b,i] + w_f[e..]·φ[b,j]`, for `θ, φ: [B,N,e]`.
    pub fn pairwise_concat(&mut self, theta: Var, phi: Var, wf: Var) -> Result<Var> {
        let st = self.shape(theta).to_vec();
        let sp = self.shape(phi).to_vec();
        let sw = self.shape(wf).to_vec();
        if st.len() != 3 || st != sp || sw != [2 * st[2]] {
            return Err(PnlError::shape(format!(
                "pairwise_concat: theta {st:?}, phi {sp:?}, w_f {sw:?}"
            )));
        }
        let (b, n, e) = (st[0], st[1], st[2]);
        self.macs.add("pairwise_concat", 2 * b as u128 * n as u128 * e as u128);
        let value = self.compute(|| {
            let (tv, pv, w) = (self.value(theta), self.value(phi), self.value(wf));
            let proj = |data: &[f64], wpart: &[f64]| -> Vec<f64> {
                data.chunks(e)
                    .map(|row| {
                        let mut s = 0.0;
                        for (x, y) in row.iter().zip(wpart) {
                            s += x * y;
                        }
                        s
                    })
                    .collect()
            };
            let a = proj(tv, &w[..e]);
            let c = proj(pv, &w[e..]);
            let mut out = Vec::with_capacity(b * n * n);
            for bi in 0..b {
                for i in 0..n {
                    for j in 0..n {
                        out.push(a[bi * n + i] + c[bi * n + j]);
                    }
                }
            }
            out
        });
        Ok(self.push(vec![b, n, n], value, Op::PairwiseConcat { theta, phi, wf }, &[theta, phi, wf]))
    }

    /// `1×3×3` patch extraction with zero padding 1: `[B,T,H,W,C] → [B,T,H',W',9C]`.
    pub fn unfold3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let d = dims5(self.shape(x))?;
        if stride == 0 {
            return Err(PnlError::config("unfold stride must be >= 1"));
        }
        let (ho, wo) = ((d[2] - 1) / stride + 1, (d[3] - 1) / stride + 1);
        let shape = vec![d[0], d[1], ho, wo, 9 * d[4]];
        let value = self.compute(|| {
            let v = self.value(x);
            let mut out = vec![0.0; numel(&shape)];
            unfold_apply(&d, stride, ho, wo, |src, dst| out[dst] = v[src]);
            out
        });
        Ok(self.push(shape, value, Op::Unfold3x3 { x, stride }, &[x]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(bias) != [c] {
            return Err(PnlError::shape(format!(
                "add_bias: {xs:?} with bias {:?}",
                self.shape(bias)
            )));
        }
        let value = self.compute(|| {
            let bv = self.value(bias);
            let mut out = self.value(x).to_vec();
            for row in out.chunks_mut(c) {
                for (o, b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
            out
        });
        Ok(self.push(xs, value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits; produces a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(PnlError::shape(format!(
                "cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        let (value, probs) = if self.counting_only {
            (Vec::new(), Vec::new())
        } else {
            let probs = kernels::softmax_rows(self.value(logits), k);
            let mut loss = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                loss -= probs[i * k + l].max(f64::MIN_POSITIVE).ln();
            }
            (vec![loss / labels.len() as f64], probs)
        };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], value, op, &[logits]))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same length as the output).
    pub fn backward(&self, output: Var, seed: &[f64]) -> Result<Adjoints> {
        if self.counting_only {
            return Err(PnlError::config("backward on a counting-only tape"));
        }
        let out_len = numel(self.shape(output));
        if seed.len() != out_len {
            return Err(PnlError::shape(format!(
                "seed length {} does not match output shape {:?}",
                seed.len(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Adjoints { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::ChannelLinear { x, w } => {
                let ws = self.shape(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = numel(self.shape(*x)) / cin;
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::matmul_bt(dy, self.value(*w), rows, cout, cin);
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::matmul_at(self.value(*x), dy, cin, rows, cout);
                    self.accumulate(grads, *w, dw);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut da = Vec::with_capacity(batch * m * k);
                let mut db = Vec::with_capacity(batch * k * n);
                for i in 0..batch {
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let dci = &dy[i * m * n..(i + 1) * m * n];
                    if trans_b {
                        da.extend(kernels::matmul(dci, bi, m, n, k));
                        db.extend(kernels::matmul_at(dci, ai, n, m, k));
                    } else {
                        da.extend(kernels::matmul_bt(dci, bi, m, n, k));
                        db.extend(kernels::matmul_at(ai, dci, k, m, n));
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Softmax { x } => {
                let cols = *node.shape.last().unwrap();
                let dx = kernels::softmax_rows_backward(&node.value, dy, cols);
                self.accumulate(grads, *x, dx);
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, dy.iter().map(|g| g * factor).collect());
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.to_vec());
            }
            &Op::AvgPool { x, factor } => {
                let d = dims5(self.shape(x)).expect("recorded rank 5");
                let od = dims5(&node.shape).expect("recorded rank 5");
                let count = (factor * factor) as f64;
                let mut dx = vec![0.0; numel(&d)];
                for b in 0..d[0] {
                    for t in 0..d[1] {
                        for h in 0..d[2] {
                            for w in 0..d[3] {
                                let src = kernels::offset5(&od, b, t, h / factor, w / factor, 0);
                                let dst = kernels::offset5(&d, b, t, h, w, 0);
                                for c in 0..d[4] {
                                    dx[dst + c] = dy[src + c] / count;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; numel(self.shape(*x))];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Upsample { x, factor } => {
                let d = dims5(self.shape(x)).expect("recorded rank 5");
                self.accumulate(grads, x, kernels::upsample_backward(dy, &d, factor));
            }
            &Op::SliceChannels { x, start, len } => {
                let c = *self.shape(x).last().unwrap();
                let mut dx = vec![0.0; numel(self.shape(x))];
                for (row_out, row_in) in dx.chunks_mut(c).zip(dy.chunks(len)) {
                    row_out[start..start + len].copy_from_slice(row_in);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Concat { parts } => {
                let total = *node.shape.last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let c = *self.shape(*p).last().unwrap();
                    let dp = kernels::slice_cols(dy, total, offset, c);
                    self.accumulate(grads, *p, dp);
                    offset += c;
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                self.accumulate(grads, *x, permute_data(dy, &node.shape, &inverse));
            }
            Op::MeanPositions { x } => {
                let xs = self.shape(*x);
                let (b, c) = (xs[0], xs[xs.len() - 1]);
                let p = numel(xs) / (b * c);
                let mut dx = Vec::with_capacity(numel(xs));
                for bi in 0..b {
                    for _ in 0..p {
                        dx.extend(dy[bi * c..(bi + 1) * c].iter().map(|g| g / p as f64));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::PairwiseConcat { theta, phi, wf } => {
                let s = self.shape(theta);
                let (b, n, e) = (s[0], s[1], s[2]);
                let w = self.value(wf);
                // row sums feed θ, column sums feed φ
                let mut row_sum = vec![0.0; b * n];
                let mut col_sum = vec![0.0; b * n];
                for bi in 0..b {
                    for i in 0..n {
                        for j in 0..n {
                            let g = dy[(bi * n + i) * n + j];
                            row_sum[bi * n + i] += g;
                            col_sum[bi * n + j] += g;
                        }
                    }
                }
                let (tv, pv) = (self.value(theta), self.value(phi));
                let mut dtheta = vec![0.0; b * n * e];
                let mut dphi = vec![0.0; b * n * e];
                let mut dw = vec![0.0; 2 * e];
                for r in 0..b * n {
                    for c in 0..e {
                        dtheta[r * e + c] = w[c] * row_sum[r];
                        dphi[r * e + c] = w[e + c] * col_sum[r];
                        dw[c] += tv[r * e + c] * row_sum[r];
                        dw[e + c] += pv[r * e + c] * col_sum[r];
                    }
                }
                self.accumulate(grads, theta, dtheta);
                self.accumulate(grads, phi, dphi);
                self.accumulate(grads, wf, dw);
            }
            &Op::Unfold3x3 { x, stride } => {
                let d = dims5(self.shape(x)).expect("recorded rank 5");
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let mut dx = vec![0.0; numel(&d)];
                unfold_apply(&d, stride, ho, wo, |src, dst| dx[src] += dy[dst]);
                self.accumulate(grads, x, dx);
            }
            &Op::AddBias { x, bias } => {
                let c = *node.shape.last().unwrap();
                let mut db = vec![0.0; c];
                for row in dy.chunks(c) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, x, dy.to_vec());
                self.accumulate(grads, bias, db);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Visits every (source, destination) pair of a 3×3, pad-1 unfold.
fn unfold_apply(d: &Dims5, stride: usize, ho: usize, wo: usize, mut f: impl FnMut(usize, usize)) {
    let [bs, ts, hs, ws, cs] = *d;
    let od = [bs, ts, ho, wo, 9 * cs];
    for b in 0..bs {
        for t in 0..ts {
            for oh in 0..ho {
                for ow in 0..wo {
                    for kh in 0..3 {
                        let h = (oh * stride + kh) as isize - 1;
                        if h < 0 || h >= hs as isize {
                            continue;
                        }
                        for kw in 0..3 {
                            let w = (ow * stride + kw) as isize - 1;
                            if w < 0 || w >= ws as isize {
                                continue;
                            }
                            let src = kernels::offset5(d, b, t, h as usize, w as usize, 0);
                            let dst = kernels::offset5(&od, b, t, oh, ow, (kh * 3 + kw) * cs);
                            for c in 0..cs {
                                f(src + c, dst + c);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Result of [`GradTape::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Adjoint of `v`; `None` when `v` does not influence the output through
    /// any differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, or zeros of length `len` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Builds a graph over the given leaves, seeds the output with `weights`,
    /// and compares every leaf adjoint with central differences.
    fn check<F>(leaves: Vec<(Vec<usize>, Vec<f64>)>, build: F)
    where
        F: Fn(&mut GradTape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let run = |vals: &[Vec<f64>]| -> (GradTape, Vec<Var>, Var) {
            let mut tape = GradTape::new();
            let vars: Vec<Var> = leaves
                .iter()
                .zip(vals)
                .map(|((s, _), v)| tape.leaf(s, v.clone(), true).unwrap())
                .collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let base: Vec<Vec<f64>> = leaves.iter().map(|(_, v)| v.clone()).collect();
        let (tape, vars, out) = run(&base);
        let seed = rand_vec(&mut rng, tape.value(out).len());
        let adj = tape.backward(out, &seed).unwrap();
        let loss = |vals: &[Vec<f64>]| -> f64 {
            let (t, _, o) = run(vals);
            t.value(o).iter().zip(&seed).map(|(a, b)| a * b).sum()
        };
        for (i, v) in vars.iter().enumerate() {
            let numeric = central_difference(&base, i, 1e-5, loss);
            let analytic = adj.get_or_zeros(*v, base[i].len());
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "leaf {i}: relative error {err}");
        }
    }

    #[test]
    fn sum_seed_gives_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&[2, 3], vec![0.5; 6], true).unwrap();
        let adj = tape.backward(x, &[1.0; 6]).unwrap();
        assert_eq!(adj.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn identity_channel_linear_passes_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&[1, 1, 2, 2, 3], vec![0.25; 12], true).unwrap();
        let w = tape.matrix(&Matrix::identity(3), false);
        let y = tape.channel_linear(x, w).unwrap();
        let adj = tape.backward(y, &[1.0; 12]).unwrap();
        assert_eq!(adj.get(x).unwrap(), &[1.0; 12]);
        assert!(adj.get(w).is_none());
    }

    #[test]
    fn seed_shape_mismatch_is_error() {
        let mut tape = GradTape::new();
        let x = tape.leaf(&[4], vec![0.0; 4], true).unwrap();
        assert!(matches!(tape.backward(x, &[1.0; 3]), Err(PnlError::Shape(_))));
    }

    #[test]
    fn gradient_of_each_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s5 = vec![2, 2, 4, 4, 3];
        let n5 = numel(&s5);

        check(vec![(s5.clone(), rand_vec(&mut rng, n5)), (vec![3, 2], rand_vec(&mut rng, 6))], |t, v| {
            t.channel_linear(v[0], v[1]).unwrap()
        });
        check(
            vec![(vec![2, 3, 4], rand_vec(&mut rng, 24)), (vec![2, 4, 5], rand_vec(&mut rng, 40))],
            |t, v| t.bmm(v[0], v[1], false).unwrap(),
        );
        check(
            vec![(vec![2, 3, 4], rand_vec(&mut rng, 24)), (vec![2, 5, 4], rand_vec(&mut rng, 40))],
            |t, v| t.bmm(v[0], v[1], true).unwrap(),
        );
        check(vec![(vec![3, 5], rand_vec(&mut rng, 15))], |t, v| t.softmax(v[0]));
        check(vec![(vec![7], rand_vec(&mut rng, 7))], |t, v| t.scale(v[0], -1.5));
        check(vec![(vec![9], rand_vec(&mut rng, 9))], |t, v| t.relu(v[0]));
        check(vec![(s5.clone(), rand_vec(&mut rng, n5))], |t, v| t.avg_pool(v[0], 2).unwrap());
        check(vec![(s5.clone(), rand_vec(&mut rng, n5))], |t, v| t.max_pool(v[0], 4).unwrap());
        check(vec![(s5.clone(), rand_vec(&mut rng, n5))], |t, v| t.upsample(v[0], 2).unwrap());
        check(vec![(s5.clone(), rand_vec(&mut rng, n5))], |t, v| t.slice_channels(v[0], 1, 2).unwrap());
        check(
            vec![(vec![2, 3, 2], rand_vec(&mut rng, 12)), (vec![2, 3, 1], rand_vec(&mut rng, 6))],
            |t, v| t.concat(&[v[0], v[1], v[0]]).unwrap(),
        );
        check(vec![(vec![2, 3, 4, 5], rand_vec(&mut rng, 120))], |t, v| {
            t.permute(v[0], &[0, 2, 1, 3]).unwrap()
        });
        check(vec![(s5.clone(), rand_vec(&mut rng, n5))], |t, v| t.mean_positions(v[0]).unwrap());
        check(
            vec![
                (vec![2, 4, 3], rand_vec(&mut rng, 24)),
                (vec![2, 4, 3], rand_vec(&mut rng, 24)),
                (vec![6], rand_vec(&mut rng, 6)),
            ],
            |t, v| t.pairwise_concat(v[0], v[1], v[2]).unwrap(),
        );
        check(vec![(vec![1, 2, 5, 4, 2], rand_vec(&mut rng, 80))], |t, v| t.unfold3x3(v[0], 1).unwrap());
        check(vec![(vec![1, 2, 5, 4, 2], rand_vec(&mut rng, 80))], |t, v| t.unfold3x3(v[0], 2).unwrap());
        check(
            vec![(vec![3, 4], rand_vec(&mut rng, 12)), (vec![4], rand_vec(&mut rng, 4))],
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
        );
        check(vec![(vec![3, 4], rand_vec(&mut rng, 12))], |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap());
        check(
            vec![(vec![4], rand_vec(&mut rng, 4)), (vec![4], rand_vec(&mut rng, 4))],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                t.add(s, v[0]).unwrap()
            },
        );
    }

    #[test]
    fn counting_tape_tracks_shapes_and_macs() {
        let mut full = GradTape::new();
        let mut dry = GradTape::counting();
        let shape = Shape5::new(1, 2, 4, 4, 8).unwrap();
        let w = Matrix::zeros(8, 4);
        for tape in [&mut full, &mut dry] {
            let x = tape.shaped_input(shape);
            let wv = tape.matrix(&w, false);
            let y = tape.channel_linear(x, wv).unwrap();
            assert_eq!(tape.shape(y), &[1, 2, 4, 4, 4]);
        }
        assert_eq!(full.macs().total(), 2 * 4 * 4 * 8 * 4);
        assert_eq!(full.macs(), dry.macs());
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        let back = permute_data(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, data);
        // element [1,2,3] lands at [3,1,2]
        assert_eq!(p[3 * 6 + 3 + 2], data[12 + 2 * 4 + 3]);
    }
}
