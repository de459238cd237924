use super::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Primitive operations recorded during the forward pass.
///
/// The op list is intentionally small: it covers exactly what the ViT
/// forward, the fake-quantizers, and the reconstruction losses need.
#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    /// Elementwise sum; `b`'s shape must be a trailing suffix of `a`'s shape
    /// (equal shapes, bias over the last axis, position tables, ...).
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    ScalarMul { a: TensorId, c: S },
    /// Batched matrix product `[..., m, k] x [..., k, n]`; leading dims equal.
    Matmul { a: TensorId, b: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Reshape { a: TensorId },
    /// `[B, C, H, W]` -> `[B, N, P*P*C]`, non-overlapping patches.
    ExtractPatches { a: TensorId, patch: usize },
    Gelu { a: TensorId },
    /// Round half-to-even forward, identity backward.
    SteRound { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: S },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    MseLoss { a: TensorId, b: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    /// Quantize-dequantize through a uniform grid. `pre` caches the rounded
    /// pre-clamp codes so the backward pass can gate on the clamp.
    FakeQuantUniform {
        x: TensorId,
        scale: TensorId,
        zero_point: Vec<S>,
        bits: u32,
        axis: Option<usize>,
        pre: Vec<S>,
    },
    /// Quantize-dequantize through a power-of-two grid (post-softmax inputs).
    FakeQuantLog2 { x: TensorId, scale: TensorId, bits: u32, pre: Vec<S> },
}

/// Record of one forward pass: tensors plus the ops that produced them, in
/// topological order. Backward visits the ops exactly once, in reverse.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_of(index: usize, shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => 0,
        Some(ax) => {
            let stride: usize = shape[ax + 1..].iter().product();
            (index / stride) % shape[ax]
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> TensorId {
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, t: Tensor<S>, op: Op<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        self.ops.push(op);
        id
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> TensorId {
        self.push(Tensor::new(shape, data), op)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value snapshot with no gradient state attached.
    pub fn detach(&self, id: TensorId) -> Tensor<S> {
        let t = &self.nodes[id.0];
        Tensor::new(t.shape.clone(), t.data.clone())
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        assert_eq!(self.nodes[id.0].data.len(), 1, "expected scalar tensor");
        self.nodes[id.0].data[0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            ashape.len() >= bshape.len() && ashape[ashape.len() - bshape.len()..] == bshape[..],
            "add: rhs shape {:?} is not a suffix of lhs shape {:?}",
            bshape,
            ashape
        );
        let blen = self.nodes[b.0].data.len();
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].data[i % blen])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "sub: shape mismatch");
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "mul: shape mismatch");
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: S) -> TensorId {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::ScalarMul { a, c })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        assert!(ashape.len() >= 2 && bshape.len() == ashape.len(), "matmul: rank mismatch");
        let nd = ashape.len();
        assert_eq!(ashape[..nd - 2], bshape[..nd - 2], "matmul: batch dims differ");
        let (m, k) = (ashape[nd - 2], ashape[nd - 1]);
        let (k2, n) = (bshape[nd - 2], bshape[nd - 1]);
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} do not agree");
        let batch: usize = ashape[..nd - 2].iter().product();
        let mut data = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            mm_nn(
                &self.nodes[a.0].data[t * m * k..(t + 1) * m * k],
                &self.nodes[b.0].data[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut data[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = ashape[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.result(shape, data, Op::Matmul { a, b })
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert_eq!(perm.len(), shape.len(), "permute: rank mismatch");
        let (data, out_shape) = permute_data(&self.nodes[a.0].data, &shape, perm);
        self.result(out_shape, data, Op::Permute { a, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].data.len(),
            "reshape: element count mismatch"
        );
        let data = self.nodes[a.0].data.clone();
        self.result(shape, data, Op::Reshape { a })
    }

    pub fn extract_patches(&mut self, a: TensorId, patch: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert_eq!(shape.len(), 4, "extract_patches: expected [B, C, H, W]");
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h % patch == 0 && w % patch == 0, "extract_patches: size not divisible");
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let dim = patch * patch * c;
        let src = &self.nodes[a.0].data;
        let mut data = vec![S::zero(); bsz * n * dim];
        for b in 0..bsz {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    for ch in 0..c {
                        for py in 0..patch {
                            for px in 0..patch {
                                let dst = ((b * n + tok) * dim) + ch * patch * patch + py * patch + px;
                                let from = ((b * c + ch) * h + gy * patch + py) * w + gx * patch + px;
                                data[dst] = src[from];
                            }
                        }
                    }
                }
            }
        }
        self.result(vec![bsz, n, dim], data, Op::ExtractPatches { a, patch })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(1.0 / std::f64::consts::SQRT_2);
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| half * x * (S::one() + (x * inv_sqrt2).erf()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::Gelu { a })
    }

    pub fn ste_round(&mut self, a: TensorId) -> TensorId {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.round_half_even()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.result(shape, data, Op::SteRound { a })
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let data = softmax_data(&self.nodes[a.0].data, &shape, axis);
        self.result(shape, data, Op::Softmax { a, axis })
    }

    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: S) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("layernorm: rank 0 input");
        assert_eq!(self.nodes[gamma.0].data.len(), d, "layernorm: gamma length");
        assert_eq!(self.nodes[beta.0].data.len(), d, "layernorm: beta length");
        let rows = self.nodes[x.0].data.len() / d;
        let mut data = vec![S::zero(); rows * d];
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let dn = S::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        self.result(shape, data, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert!(axis < shape.len(), "mean_axis: axis out of range");
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a.0].data;
        let mut data = vec![S::zero(); outer * inner];
        let midn = S::from_f64(mid as f64);
        for o in 0..outer {
            for j in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * mid + j) * inner + i];
                }
            }
            for i in 0..inner {
                data[o * inner + i] /= midn;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.result(out_shape, data, Op::MeanAxis { a, axis })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().copied().sum::<S>();
        self.result(vec![1], vec![s], Op::SumAll { a })
    }

    pub fn mse_loss(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "mse_loss: shape mismatch");
        let n = S::from_f64(self.nodes[a.0].data.len() as f64);
        let s = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>();
        self.result(vec![1], vec![s / n], Op::MseLoss { a, b })
    }

    /// Mean negative log-likelihood over the batch, with stable log-softmax.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let shape = self.nodes[logits.0].shape.clone();
        assert_eq!(shape.len(), 2, "cross_entropy: expected [B, C] logits");
        let (bsz, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), bsz, "cross_entropy: label count mismatch");
        let data = &self.nodes[logits.0].data;
        let mut total = S::zero();
        for b in 0..bsz {
            let row = &data[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[labels[b]];
        }
        let loss = total / S::from_f64(bsz as f64);
        self.result(vec![1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec() })
    }

    /// Uniform quantize-dequantize. `scale` is a tape tensor (length 1 for
    /// per-layer, or the axis length for per-channel) so it can be trained.
    /// The zero-point stays fixed. Backward: straight-through to `x`, gated
    /// to zero where the clamp was active; the scale receives the dequantized
    /// centered code, matching finite differences away from rounding edges.
    pub fn fake_quant_uniform(
        &mut self,
        x: TensorId,
        scale: TensorId,
        zero_point: &[S],
        bits: u32,
        axis: Option<usize>,
    ) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let scale_len = self.nodes[scale.0].data.len();
        match axis {
            None => assert_eq!(scale_len, 1, "fake_quant_uniform: per-layer scale length"),
            Some(ax) => {
                assert!(ax < shape.len(), "fake_quant_uniform: axis out of range");
                assert_eq!(scale_len, shape[ax], "fake_quant_uniform: per-channel scale length");
            }
        }
        assert_eq!(zero_point.len(), scale_len, "fake_quant_uniform: zero-point length");
        let qmax = S::from_f64(((1u64 << bits) - 1) as f64);
        let n = self.nodes[x.0].data.len();
        let mut data = vec![S::zero(); n];
        let mut pre = vec![S::zero(); n];
        for i in 0..n {
            let ch = channel_of(i, &shape, axis);
            let s = self.nodes[scale.0].data[ch];
            let z = zero_point[ch];
            let p = (self.nodes[x.0].data[i] / s).round_half_even() + z;
            let code = p.max(S::zero()).min(qmax);
            pre[i] = p;
            data[i] = s * (code - z);
        }
        self.result(shape, data, Op::FakeQuantUniform { x, scale, zero_point: zero_point.to_vec(), bits, axis, pre })
    }

    /// Power-of-two quantize-dequantize for non-negative inputs. Zero maps to
    /// the largest code (smallest representable magnitude).
    pub fn fake_quant_log2(&mut self, x: TensorId, scale: TensorId, bits: u32) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        assert_eq!(self.nodes[scale.0].data.len(), 1, "fake_quant_log2: per-layer scale length");
        let qmax = S::from_f64(((1u64 << bits) - 1) as f64);
        let s = self.nodes[scale.0].data[0];
        let n = self.nodes[x.0].data.len();
        let mut data = vec![S::zero(); n];
        let mut pre = vec![S::zero(); n];
        for i in 0..n {
            let v = self.nodes[x.0].data[i];
            let p = if v <= S::zero() { S::infinity() } else { (-(v / s).log2()).round_half_even() };
            let code = p.max(S::zero()).min(qmax);
            pre[i] = p;
            data[i] = s * S::from_f64(f64::exp2(-code.to_f64()));
        }
        self.result(shape, data, Op::FakeQuantLog2 { x, scale, bits, pre })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into each
    /// node's `grad` across repeated calls; unreachable nodes get zeros.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward: loss must be a scalar");
        let n = self.nodes.len();
        let mut flow: Vec<Vec<S>> = self.nodes.iter().map(|t| vec![S::zero(); t.data.len()]).collect();
        flow[loss.0][0] = S::one();

        for i in (0..n).rev() {
            if flow[i].iter().all(|v| *v == S::zero()) {
                continue;
            }
            let g = std::mem::take(&mut flow[i]);
            self.propagate(i, &g, &mut flow);
            flow[i] = g;
        }

        for (node, f) in self.nodes.iter_mut().zip(flow.into_iter()) {
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(f.iter()) {
                        *a += *v;
                    }
                }
                slot => *slot = Some(f),
            }
        }
    }

    fn propagate(&self, i: usize, g: &[S], flow: &mut [Vec<S>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for (dst, &v) in flow[a.0].iter_mut().zip(g.iter()) {
                    *dst += v;
                }
                let blen = self.nodes[b.0].data.len();
                for (j, &v) in g.iter().enumerate() {
                    flow[b.0][j % blen] += v;
                }
            }
            Op::Sub { a, b } => {
                for (dst, &v) in flow[a.0].iter_mut().zip(g.iter()) {
                    *dst += v;
                }
                for (dst, &v) in flow[b.0].iter_mut().zip(g.iter()) {
                    *dst -= v;
                }
            }
            Op::Mul { a, b } => {
                for j in 0..g.len() {
                    flow[a.0][j] += g[j] * self.nodes[b.0].data[j];
                }
                for j in 0..g.len() {
                    flow[b.0][j] += g[j] * self.nodes[a.0].data[j];
                }
            }
            Op::ScalarMul { a, c } => {
                for (dst, &v) in flow[a.0].iter_mut().zip(g.iter()) {
                    *dst += v * *c;
                }
            }
            Op::Matmul { a, b } => {
                let ashape = &self.nodes[a.0].shape;
                let nd = ashape.len();
                let (m, k) = (ashape[nd - 2], ashape[nd - 1]);
                let n = self.nodes[b.0].shape[nd - 1];
                let batch: usize = ashape[..nd - 2].iter().product();
                for t in 0..batch {
                    let gc = &g[t * m * n..(t + 1) * m * n];
                    mm_nt(
                        gc,
                        &self.nodes[b.0].data[t * k * n..(t + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut flow[a.0][t * m * k..(t + 1) * m * k],
                    );
                    mm_tn(
                        &self.nodes[a.0].data[t * m * k..(t + 1) * m * k],
                        gc,
                        m,
                        k,
                        n,
                        &mut flow[b.0][t * k * n..(t + 1) * k * n],
                    );
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let out_shape = &self.nodes[i].shape;
                let (gperm, _) = permute_data(g, out_shape, &inv);
                for (dst, v) in flow[a.0].iter_mut().zip(gperm.into_iter()) {
                    *dst += v;
                }
            }
            Op::Reshape { a } => {
                for (dst, &v) in flow[a.0].iter_mut().zip(g.iter()) {
                    *dst += v;
                }
            }
            Op::ExtractPatches { a, patch } => {
                let shape = &self.nodes[a.0].shape;
                let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (p, gw) = (*patch, w / *patch);
                let n = (h / p) * gw;
                let dim = p * p * c;
                for b in 0..bsz {
                    for gy in 0..h / p {
                        for gx in 0..gw {
                            let tok = gy * gw + gx;
                            for ch in 0..c {
                                for py in 0..p {
                                    for px in 0..p {
                                        let src = ((b * n + tok) * dim) + ch * p * p + py * p + px;
                                        let dst = ((b * c + ch) * h + gy * p + py) * w + gx * p + px;
                                        flow[a.0][dst] += g[src];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let half = S::from_f64(0.5);
                let inv_sqrt2 = S::from_f64(1.0 / std::f64::consts::SQRT_2);
                let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                for j in 0..g.len() {
                    let x = self.nodes[a.0].data[j];
                    let cdf = half * (S::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    flow[a.0][j] += g[j] * (cdf + x * pdf);
                }
            }
            Op::SteRound { a } => {
                for (dst, &v) in flow[a.0].iter_mut().zip(g.iter()) {
                    *dst += v;
                }
            }
            Op::Softmax { a, axis } => {
                let shape = &self.nodes[i].shape;
                let p = &self.nodes[i].data;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * mid + j) * inner + ii;
                        let mut dot = S::zero();
                        for j in 0..mid {
                            dot += g[at(j)] * p[at(j)];
                        }
                        for j in 0..mid {
                            flow[a.0][at(j)] += p[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let rows = self.nodes[x.0].data.len() / d;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let dn = S::from_f64(d as f64);
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<S>() / dn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                    let inv = (var + *eps).sqrt().recip();
                    let mut mean_u = S::zero();
                    let mut mean_ux = S::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let u = g[r * d + j] * gd[j];
                        mean_u += u;
                        mean_ux += u * xhat;
                    }
                    mean_u /= dn;
                    mean_ux /= dn;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let u = g[r * d + j] * gd[j];
                        flow[x.0][r * d + j] += inv * (u - mean_u - xhat * mean_ux);
                        flow[gamma.0][j] += g[r * d + j] * xhat;
                        flow[beta.0][j] += g[r * d + j];
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                let shape = &self.nodes[a.0].shape;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let midn = S::from_f64(mid as f64);
                for o in 0..outer {
                    for j in 0..mid {
                        for ii in 0..inner {
                            flow[a.0][(o * mid + j) * inner + ii] += g[o * inner + ii] / midn;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                for dst in flow[a.0].iter_mut() {
                    *dst += g[0];
                }
            }
            Op::MseLoss { a, b } => {
                let n = S::from_f64(self.nodes[a.0].data.len() as f64);
                let two = S::from_f64(2.0);
                for j in 0..self.nodes[a.0].data.len() {
                    let diff = self.nodes[a.0].data[j] - self.nodes[b.0].data[j];
                    let d = g[0] * two * diff / n;
                    flow[a.0][j] += d;
                    flow[b.0][j] -= d;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let shape = &self.nodes[logits.0].shape;
                let (bsz, c) = (shape[0], shape[1]);
                let data = &self.nodes[logits.0].data;
                let bn = S::from_f64(bsz as f64);
                for b in 0..bsz {
                    let row = &data[b * c..(b + 1) * c];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let denom = row.iter().map(|&v| (v - max).exp()).sum::<S>();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if labels[b] == j { S::one() } else { S::zero() };
                        flow[logits.0][b * c + j] += g[0] * (p - onehot) / bn;
                    }
                }
            }
            Op::FakeQuantUniform { x, scale, zero_point, bits, axis, pre } => {
                let qmax = S::from_f64(((1u64 << *bits) - 1) as f64);
                let shape = &self.nodes[x.0].shape;
                for j in 0..g.len() {
                    let ch = channel_of(j, shape, *axis);
                    let p = pre[j];
                    if p >= S::zero() && p <= qmax {
                        flow[x.0][j] += g[j];
                    }
                    let code = p.max(S::zero()).min(qmax);
                    flow[scale.0][ch] += g[j] * (code - zero_point[ch]);
                }
            }
            Op::FakeQuantLog2 { x, scale, bits, pre } => {
                let qmax = S::from_f64(((1u64 << *bits) - 1) as f64);
                for j in 0..g.len() {
                    let p = pre[j];
                    if p >= S::zero() && p <= qmax {
                        flow[x.0][j] += g[j];
                    }
                    let code = p.max(S::zero()).min(qmax);
                    flow[scale.0][0] += g[j] * S::from_f64(f64::exp2(-code.to_f64()));
                }
            }
        }
    }
}

// ── matrix kernels (accumulating, fixed summation order) ───────────────

/// out += a[m,k] * b[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out += a[m,n] * b[p,n]^T  (dot products of contiguous rows)
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, p: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for q in 0..p {
            let brow = &b[q * n..(q + 1) * n];
            let mut s = S::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            out[i * p + q] += s;
        }
    }
}

/// out += a[m,k]^T * b[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn softmax_data<S: Scalar>(data: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![S::zero(); data.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |j: usize| (o * mid + j) * inner + ii;
            let mut max = S::neg_infinity();
            for j in 0..mid {
                max = max.max(data[at(j)]);
            }
            let mut sum = S::zero();
            for j in 0..mid {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..mid {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![S::zero(); data.len()];
    let mut coords = vec![0usize; nd];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..nd {
            src += coords[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t64(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let out = tape.matmul(i2, m);
        assert_eq!(tape.data(out), &[2.0, 3.0, 4.0, 5.0]);

        let a = tape.leaf(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t64(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        tape.matmul(a, b);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[0.0, 0.0, 0.0]));
        let p = tape.softmax(x, 0);
        for &v in tape.data(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = tape.leaf(t64(&[2], &[1000.0, 0.0]));
        let q = tape.softmax(y, 0);
        assert!((tape.data(q)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(q)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 3.0, -1.0]));
        let p = tape.softmax(x, 1);
        let d = tape.data(p);
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero_and_two_point_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[5.0, 5.0, 5.0, -1.0, -1.0, -1.0]));
        let g = tape.leaf(t64(&[3], &[1.0, 1.0, 1.0]));
        let b = tape.leaf(t64(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.layernorm(x, g, b, 1e-6);
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-3);
        }

        let x2 = tape.leaf(t64(&[1, 2], &[1.0, 3.0]));
        let g2 = tape.leaf(t64(&[2], &[1.0, 1.0]));
        let b2 = tape.leaf(t64(&[2], &[0.0, 0.0]));
        let y2 = tape.layernorm(x2, g2, b2, 0.0);
        assert!((tape.data(y2)[0] + 1.0).abs() < 1e-12);
        assert!((tape.data(y2)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[0.0, 10.0]));
        let y = tape.gelu(x);
        assert_eq!(tape.data(y)[0], 0.0);
        assert!((tape.data(y)[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn ste_round_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[4], &[2.4, 2.5, 3.5, -7.0]).requires_grad());
        let r = tape.ste_round(x);
        assert_eq!(tape.data(r), &[2.0, 2.0, 4.0, -7.0]);
        let s = tape.sum_all(r);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_loss_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[0.0, 0.0]));
        let b = tape.leaf(t64(&[2], &[1.0, 1.0]));
        let l = tape.mse_loss(a, b);
        assert_eq!(tape.scalar_value(l), 1.0);
        let l2 = tape.mse_loss(a, a);
        assert_eq!(tape.scalar_value(l2), 0.0);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).requires_grad());
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).requires_grad());
        let y = tape.leaf(t64(&[2], &[5.0, 6.0]).requires_grad());
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be a scalar")]
    fn non_scalar_loss_panics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        tape.backward(x);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.permute(x, &[1, 0]);
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.data(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.permute(xt, &[1, 0]);
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn extract_patches_layout() {
        // 1x1x4x4 image, patch 2: four tokens in row-major grid order.
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 4, 4], &img));
        let p = tape.extract_patches(x, 2);
        assert_eq!(tape.shape(p), &[1, 4, 4]);
        assert_eq!(&tape.data(p)[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tape.data(p)[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t64(&[2, 2], &[0.3, -1.2, 2.2, 0.7]).requires_grad());
            let w = tape.leaf(t64(&[2, 2], &[0.11, -0.5, 0.9, 0.01]).requires_grad());
            let h = tape.matmul(x, w);
            let hg = tape.gelu(h);
            let p = tape.softmax(hg, 1);
            let l = tape.sum_all(p);
            tape.backward(l);
            (tape.data(l).to_vec(), tape.grad(w).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
