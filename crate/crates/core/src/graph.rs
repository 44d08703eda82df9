//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its output as a new node and remembers its inputs, so the
//! arena order is already a topological order. [`Graph::backward`] walks it in
//! reverse and accumulates gradients into every leaf that requires them.
//!
//! Leaf gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grads`] is called.

use crate::error::{CadgError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: Axis,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatTokens {
        a: Var,
        b: Var,
    },
    BroadcastBatch {
        a: Var,
    },
    SelectToken {
        a: Var,
        token: usize,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        heads: usize,
    },
    TransposeLast {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Strides of a softmax axis: `outer × len × inner`.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// Precomputed offsets for a (possibly broadcast) batched matmul.
#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// numpy-style broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(CadgError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .ok_or_else(|| CadgError::shape("matmul", &sa, &sb))?;
        let a_offsets = broadcast_offsets(batch_a, &batch, m * k);
        let b_offsets = broadcast_offsets(batch_b, &batch, k * n);
        let plan = MatMulPlan {
            m,
            k,
            n,
            a_offsets,
            b_offsets,
        };

        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let count = plan.a_offsets.len();
        let mut out = vec![0.0; count * m * n];
        for (i, c) in out.chunks_mut(m * n).enumerate() {
            let ao = plan.a_offsets[i];
            let bo = plan.b_offsets[i];
            gemm_nn(m, k, n, &ad[ao..ao + m * k], &bd[bo..bo + k * n], c);
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, rg))
    }

    /// Elementwise sum. `b` may match `a` exactly or match a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(CadgError::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o += y;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CadgError::shape("mul", self.shape(a), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bd) {
            *o *= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(CadgError::Dimension(format!(
                "softmax axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(CadgError::NonFinite("softmax"));
        }
        let ax = Axis::of(x.shape(), axis);
        let mut out = x.clone();
        softmax_in_place(out.data_mut(), ax);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax { a, axis: ax }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx
            .last()
            .ok_or_else(|| CadgError::Dimension("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(CadgError::shape("layer_norm", sx, self.shape(gain)));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xd.len() / d;
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates `[B, M, d]` and `[B, N, d]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(CadgError::shape("concat_tokens", sa, sb));
        }
        let (batch, m, n, d) = (sa[0], sa[1], sb[1], sa[2]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(batch * (m + n) * d);
        for i in 0..batch {
            out.extend_from_slice(&ad[i * m * d..(i + 1) * m * d]);
            out.extend_from_slice(&bd[i * n * d..(i + 1) * n * d]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m + n, d], out)?,
            Op::ConcatTokens { a, b },
            rg,
        ))
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn broadcast_batch(&mut self, a: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(CadgError::Dimension("broadcast to an empty batch".into()));
        }
        let src = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(batch);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastBatch { a }, rg))
    }

    /// Picks token `token` out of `[B, T, d]`, giving `[B, d]`.
    pub fn select_token(&mut self, a: Var, token: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || token >= s[1] {
            return Err(CadgError::Dimension(format!(
                "select_token {token} on shape {s:?}"
            )));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(batch * d);
        for i in 0..batch {
            let off = (i * t + token) * d;
            out.extend_from_slice(&src[off..off + d]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![batch, d], out)?,
            Op::SelectToken { a, token },
            rg,
        ))
    }

    /// `[B, T, h·k] -> [B, h, T, k]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(CadgError::Dimension(format!(
                "cannot split shape {s:?} into {heads} heads"
            )));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let dk = d / heads;
        let mut out = vec![0.0; batch * t * d];
        permute_heads(self.value(a).data(), &mut out, batch, t, heads, dk, true);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![batch, heads, t, dk], out)?,
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// `[B, h, T, k] -> [B, T, h·k]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(CadgError::Dimension(format!("merge_heads on shape {s:?}")));
        }
        let (batch, heads, t, dk) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; batch * t * heads * dk];
        permute_heads(self.value(a).data(), &mut out, batch, t, heads, dk, false);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![batch, t, heads * dk], out)?,
            Op::MergeHeads { a, heads },
            rg,
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(CadgError::Dimension(format!("transpose of shape {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; self.value(a).len()];
        transpose_blocks(self.value(a).data(), &mut out, r, c);
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(CadgError::Dimension(format!(
                "cross_entropy needs [B, K] logits for {} labels, got {s:?}",
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(CadgError::LabelOutOfRange { label, classes });
        }
        let x = self.value(logits);
        if !x.all_finite() {
            return Err(CadgError::NonFinite("cross_entropy"));
        }
        let mut probs = x.data().to_vec();
        softmax_in_place(
            &mut probs,
            Axis {
                outer: batch,
                len: classes,
                inner: 1,
            },
        );
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d`loss`/d(node) back through the graph and accumulates the
    /// result into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(CadgError::NotScalar(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.leaf_grads[i].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (a, g) in acc.data_mut().iter_mut().zip(&gout) {
                    *a += g;
                }
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { m, k, n, .. } = *plan;
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if let Some(ga) = sink(nodes, grads, *a) {
                    for (bi, g) in gout.chunks(m * n).enumerate() {
                        let ao = plan.a_offsets[bi];
                        let bo = plan.b_offsets[bi];
                        gemm_nt(m, n, k, g, &bd[bo..bo + k * n], &mut ga[ao..ao + m * k]);
                    }
                }
                if let Some(gb) = sink(nodes, grads, *b) {
                    for (bi, g) in gout.chunks(m * n).enumerate() {
                        let ao = plan.a_offsets[bi];
                        let bo = plan.b_offsets[bi];
                        gemm_tn(k, m, n, &ad[ao..ao + m * k], g, &mut gb[bo..bo + k * n]);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = sink(nodes, grads, *a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = sink(nodes, grads, *b) {
                    let len = gb.len();
                    for chunk in gout.chunks(len) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if let Some(ga) = sink(nodes, grads, *a) {
                    for ((g, &o), &y) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += o * y;
                    }
                }
                if let Some(gb) = sink(nodes, grads, *b) {
                    for ((g, &o), &x) in gb.iter_mut().zip(gout).zip(ad) {
                        *g += o * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = sink(nodes, grads, *a) {
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o * factor;
                    }
                }
            }
            Op::Gelu { a } => {
                let ad = nodes[a.0].value.data();
                if let Some(ga) = sink(nodes, grads, *a) {
                    for ((g, &o), &x) in ga.iter_mut().zip(gout).zip(ad) {
                        *g += o * gelu_derivative(x);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = nodes[i].value.data();
                if let Some(ga) = sink(nodes, grads, *a) {
                    let Axis { outer, len, inner } = *axis;
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + j;
                            let dot: f64 = (0..len).map(|t| gout[at(t)] * y[at(t)]).sum();
                            for t in 0..len {
                                ga[at(t)] += y[at(t)] * (gout[at(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let g = nodes[gain.0].value.data();
                let d = g.len();
                if let Some(gx) = sink(nodes, grads, *x) {
                    for (r, &rstd) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let go = &gout[row.clone()];
                        let xh = &normalized[row.clone()];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * g[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let out = &mut gx[row];
                        for j in 0..d {
                            let dxh = go[j] * g[j];
                            out[j] += rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(gg) = sink(nodes, grads, *gain) {
                    for (go, xh) in gout.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = sink(nodes, grads, *bias) {
                    for go in gout.chunks(d) {
                        add_into(gb, go);
                    }
                }
            }
            Op::ConcatTokens { a, b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (batch, m, n, d) = (sa[0], sa[1], sb[1], sa[2]);
                if let Some(ga) = sink(nodes, grads, *a) {
                    for bi in 0..batch {
                        let src = &gout[bi * (m + n) * d..][..m * d];
                        add_into(&mut ga[bi * m * d..(bi + 1) * m * d], src);
                    }
                }
                if let Some(gb) = sink(nodes, grads, *b) {
                    for bi in 0..batch {
                        let src = &gout[(bi * (m + n) + m) * d..][..n * d];
                        add_into(&mut gb[bi * n * d..(bi + 1) * n * d], src);
                    }
                }
            }
            Op::BroadcastBatch { a } => {
                if let Some(ga) = sink(nodes, grads, *a) {
                    let len = ga.len();
                    for chunk in gout.chunks(len) {
                        add_into(ga, chunk);
                    }
                }
            }
            Op::SelectToken { a, token } => {
                let s = nodes[a.0].value.shape();
                let (t, d) = (s[1], s[2]);
                if let Some(ga) = sink(nodes, grads, *a) {
                    for (bi, go) in gout.chunks(d).enumerate() {
                        let off = (bi * t + token) * d;
                        add_into(&mut ga[off..off + d], go);
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                let s = nodes[a.0].value.shape();
                let (batch, t, d) = (s[0], s[1], s[2]);
                if let Some(ga) = sink(nodes, grads, *a) {
                    let mut tmp = vec![0.0; ga.len()];
                    permute_heads(gout, &mut tmp, batch, t, *heads, d / heads, false);
                    add_into(ga, &tmp);
                }
            }
            Op::MergeHeads { a, heads } => {
                let s = nodes[a.0].value.shape();
                let (batch, t, dk) = (s[0], s[2], s[3]);
                if let Some(ga) = sink(nodes, grads, *a) {
                    let mut tmp = vec![0.0; ga.len()];
                    permute_heads(gout, &mut tmp, batch, t, *heads, dk, true);
                    add_into(ga, &tmp);
                }
            }
            Op::TransposeLast { a } => {
                let s = nodes[i].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = sink(nodes, grads, *a) {
                    let mut tmp = vec![0.0; ga.len()];
                    transpose_blocks(gout, &mut tmp, r, c);
                    add_into(ga, &tmp);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = sink(nodes, grads, *a) {
                    add_into(ga, gout);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = sink(nodes, grads, *a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = gout[0] / labels.len() as f64;
                if let Some(gl) = sink(nodes, grads, *logits) {
                    for (bi, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[bi * classes + c] += scale * (probs[bi * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn sink<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(data: &mut [f64], axis: Axis) {
    let Axis { outer, len, inner } = axis;
    for o in 0..outer {
        for j in 0..inner {
            let at = |t: usize| (o * len + t) * inner + j;
            let max = (0..len).map(|t| data[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (data[at(t)] - max).exp();
                data[at(t)] = e;
                total += e;
            }
            for t in 0..len {
                data[at(t)] /= total;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Moves `[B, T, h, k]` to `[B, h, T, k]` (`split = true`) or back.
fn permute_heads(src: &[f64], dst: &mut [f64], batch: usize, t: usize, heads: usize, dk: usize, split: bool) {
    for b in 0..batch {
        for tok in 0..t {
            for h in 0..heads {
                let merged = ((b * t + tok) * heads + h) * dk;
                let split_at = ((b * heads + h) * t + tok) * dk;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                dst[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
}

/// Transposes each trailing `r × c` block of `src` into `dst`.
fn transpose_blocks(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for (s, d) in src.chunks(r * c).zip(dst.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

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

/// Offset of each broadcast batch element's matrix inside an operand whose
/// own batch shape is `own`.
fn broadcast_offsets(own: &[usize], batch: &[usize], block: usize) -> Vec<usize> {
    let count: usize = batch.iter().product();
    let lead = batch.len() - own.len();
    (0..count)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; batch.len()];
            for ax in (0..batch.len()).rev() {
                idx[ax] = rem % batch[ax];
                rem /= batch[ax];
            }
            let mut off = 0;
            for (ax, &ext) in own.iter().enumerate() {
                let i = if ext == 1 { 0 } else { idx[lead + ax] };
                off = off * ext + i;
            }
            off * block
        })
        .collect()
}

// Products run through `matrixmultiply`, which is single-threaded and
// deterministic: each output element depends only on its own row and column,
// never on where the row sits in the batch.

/// `c += a · b` with `a: m×k`, `b: k×n`.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, [k, 1], b, [n, 1], c);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, [k, 1], b, [1, k], c);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, [1, m], b, [n, 1], c);
}

/// `c += A · B` where `A` (`m×k`) and `B` (`k×n`) are read through
/// `[row, column]` strides and `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: [usize; 2], b: &[f64], sb: [usize; 2], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every strided access of the m×k,
    // k×n and m×n operands, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_rank2_rhs_over_batch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(p), &[2, 1, 2]);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(CadgError::NonFinite(_))));
        let y = g.constant(Tensor::zeros(&[2]));
        assert!(g.softmax(y, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.at(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((v.at(&[0, 1]) + v.at(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let c = g.constant(Tensor::full(&[4], 7.5));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn gelu_add_identities() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1]));
        let y = g.gelu(z);
        assert_eq!(g.value(y).data(), &[0.0]);
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let s = g.add(x, zeros).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_certain() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let l = g.constant(t(&[1, 3], &[0.0, 800.0, 0.0]));
        let ce = g.cross_entropy(l, &[1]).unwrap();
        assert!(g.value(ce).item().unwrap() < 1e-300);

        let l = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(l, &[3]),
            Err(CadgError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rand::thread_rng()), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 6.0]);
        // second call accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0, 12.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(CadgError::NotScalar(_))));
    }

    #[test]
    fn concat_and_heads_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 4], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 3, 4], |i| 100.0 + i as f64));
        let c = g.concat_tokens(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 4]);
        assert_eq!(g.value(c).at(&[1, 0, 2]), 6.0);
        assert_eq!(g.value(c).at(&[1, 1, 0]), 112.0);
        let h = g.split_heads(c, 2).unwrap();
        assert_eq!(g.shape(h), &[2, 2, 4, 2]);
        assert_eq!(g.value(h).at(&[1, 1, 1, 0]), g.value(c).at(&[1, 1, 2]));
        let m = g.merge_heads(h).unwrap();
        assert_eq!(g.value(m), g.value(c));
    }
}
