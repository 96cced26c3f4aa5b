//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records an eagerly-evaluated graph. Leaves enter either as
//! `var` (trainable, receives gradients) or `constant` (frozen). An op node
//! only records backward information when at least one input needs
//! gradients, so frozen subgraphs (e.g. teacher forward passes) keep values
//! but build no tape.
//!
//! Elementwise binary ops broadcast numpy-style; `matmul` broadcasts over
//! leading batch dimensions. All reductions run in a fixed order, so a given
//! graph evaluates bit-identically on every run.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{broadcast_shapes, broadcast_strides, for_each_broadcast2, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const COSINE_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
    record: Option<Record>,
}

enum Record {
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f32,
    },
    TransposeLastTwo {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
        // tanh of the inner polynomial, cached for the backward pass
        inner_tanh: Vec<f32>,
    },
    SoftmaxLastDim {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    CosineLastDim {
        a: NodeId,
        b: NodeId,
        // per row: (dot, |a|, |b|)
        rows: Vec<(f32, f32, f32)>,
    },
    LogSigmoid {
        a: NodeId,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        // cached im2col matrices, one [l_out, c_in*k] block per batch cell
        cols: Vec<Vec<f32>>,
    },
    SliceLastDim {
        a: NodeId,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate bytes held by node values (used for memory accounting).
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * 4).sum()
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, None)
    }

    /// Frozen leaf; no gradients flow into or through it alone.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, record: Option<Record>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            record,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[NodeId], record: Record) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, needs, if needs { Some(record) } else { None })
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product with broadcasting over leading batch dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = broadcast_shapes("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);

        let mut out = vec![0.0f32; out_shape.iter().product()];
        if sb.len() == 2 {
            // every batch cell shares the same rhs: one flat kernel call
            let rows: usize = va.numel() / k;
            kernels::matmul_nn(va.data(), vb.data(), &mut out, rows, k, n);
        } else {
            for (a_off, b_off, o_off) in batch_offsets(&batch, sa, sb, m * k, k * n, m * n) {
                kernels::matmul_nn(
                    &va.data()[a_off..a_off + m * k],
                    &vb.data()[b_off..b_off + k * n],
                    &mut out[o_off..o_off + m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[a, b], Record::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Record::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Record::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        rec: impl Fn(NodeId, NodeId) -> Record,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(op, va.shape(), vb.shape())?;
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(out_shape, data)?
        } else {
            let rank = out_shape.len();
            let astr = broadcast_strides(va.shape(), rank);
            let bstr = broadcast_strides(vb.shape(), rank);
            let mut data = vec![0.0f32; out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast2(&out_shape, &astr, &bstr, |o, ai, bi| {
                data[o] = f(da[ai], db[bi]);
            });
            Tensor::new(out_shape, data)?
        };
        Ok(self.push_op(value, &[a, b], rec(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(value, &[a], Record::Scale { a, factor })
    }

    pub fn transpose_last_two(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose-last-two",
                shape: s.to_vec(),
                reason: "rank must be >= 2".into(),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let cells = va.numel() / (m * n);
        let mut out_shape = s.to_vec();
        out_shape.swap(s.len() - 2, s.len() - 1);
        let mut out = vec![0.0f32; va.numel()];
        let src = va.data();
        for c in 0..cells {
            let base = c * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[a], Record::TransposeLastTwo { a }))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        let va = self.value(a);
        let mut inner_tanh = Vec::with_capacity(va.numel());
        let data: Vec<f32> = va
            .data()
            .iter()
            .map(|&x| {
                let t = (C * (x + 0.044715 * x * x * x)).tanh();
                inner_tanh.push(t);
                0.5 * x * (1.0 + t)
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(value, &[a], Record::Gelu { a, inner_tanh })
    }

    pub fn softmax_last_dim(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.is_empty() {
            return Err(Error::InvalidShape {
                op: "softmax-last-dim",
                shape: s.to_vec(),
                reason: "rank must be >= 1".into(),
            });
        }
        let d = s[s.len() - 1];
        let rows = va.numel() / d;
        let mut out = vec![0.0f32; va.numel()];
        let src = va.data();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in &mut out[r * d..(r + 1) * d] {
                *o *= inv;
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push_op(value, &[a], Record::SoftmaxLastDim { a }))
    }

    /// Layer norm over the last dim with learned gain/bias, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let s = vx.shape();
        let d = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "layer-norm",
            shape: s.to_vec(),
            reason: "rank must be >= 1".into(),
        })?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer-norm",
                lhs: s.to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.numel() / d;
        let mut out = vec![0.0f32; vx.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let (src, g, b) = (vx.data(), vg.data(), vb.data());
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean.push(mu);
            inv_std.push(is);
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = (row[j] - mu) * is * g[j] + b[j];
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push_op(
            value,
            &[x, gain, bias],
            Record::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if axis >= s.len() {
            return Err(Error::InvalidShape {
                op: "mean-over-axis",
                shape: s.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let count = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0f32; outer * inner];
        let src = va.data();
        let inv = 1.0 / count as f32;
        for o in 0..outer {
            for c in 0..count {
                let base = (o * count + c) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[a], Record::MeanAxis { a, axis }))
    }

    /// Mean absolute difference over all elements; scalar output.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "l1-mean",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (x, y) in va.data().iter().zip(vb.data()) {
            acc += (x - y).abs() as f64;
        }
        let value = Tensor::scalar((acc / va.numel() as f64) as f32);
        Ok(self.push_op(value, &[a, b], Record::L1Mean { a, b }))
    }

    /// Cosine similarity over the last dim; output drops that dim.
    pub fn cosine_last_dim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "cosine-similarity",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let s = va.shape();
        let d = s[s.len() - 1];
        let rows = va.numel() / d;
        let out_shape = s[..s.len() - 1].to_vec();
        let mut out = Vec::with_capacity(rows);
        let mut cache = Vec::with_capacity(rows);
        for r in 0..rows {
            let xa = &va.data()[r * d..(r + 1) * d];
            let xb = &vb.data()[r * d..(r + 1) * d];
            let mut s_ab = 0.0f64;
            let mut s_aa = 0.0f64;
            let mut s_bb = 0.0f64;
            for (x, y) in xa.iter().zip(xb) {
                s_ab += (*x as f64) * (*y as f64);
                s_aa += (*x as f64) * (*x as f64);
                s_bb += (*y as f64) * (*y as f64);
            }
            let (p, q) = (s_aa.sqrt() as f32, s_bb.sqrt() as f32);
            out.push(s_ab as f32 / (p * q + COSINE_EPS));
            cache.push((s_ab as f32, p, q));
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[a, b], Record::CosineLastDim { a, b, rows: cache }))
    }

    /// Elementwise log(sigmoid(x)), numerically stable.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f32> = va
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    -(-x).exp().ln_1p()
                } else {
                    x - x.exp().ln_1p()
                }
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(value, &[a], Record::LogSigmoid { a })
    }

    /// Row lookup: `table[indices[i], :]` stacked into `[len, d]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let s = vt.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding-lookup",
                shape: s.to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidShape {
                op: "embedding-lookup",
                shape: s.to_vec(),
                reason: format!("index {bad} out of range {v}"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push_op(
            value,
            &[table],
            Record::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// 1-d convolution, no padding. `x: [*, c_in, l]`, `w: [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() < 2 || sw.len() != 3 || sx[sx.len() - 2] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (c_in, l) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (c_out, k) = (sw[0], sw[2]);
        if l < k || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv1d",
                shape: sx.to_vec(),
                reason: format!("input length {l} shorter than kernel {k} (stride {stride})"),
            });
        }
        let l_out = (l - k) / stride + 1;
        let cells = vx.numel() / (c_in * l);
        let mut out_shape = sx[..sx.len() - 2].to_vec();
        out_shape.extend_from_slice(&[c_out, l_out]);

        let mut out = vec![0.0f32; cells * c_out * l_out];
        let mut cols = Vec::with_capacity(cells);
        for cell in 0..cells {
            let xb = &vx.data()[cell * c_in * l..(cell + 1) * c_in * l];
            // im2col: [l_out, c_in*k]
            let mut col = vec![0.0f32; l_out * c_in * k];
            for t in 0..l_out {
                let dst = &mut col[t * c_in * k..(t + 1) * c_in * k];
                for c in 0..c_in {
                    let src = &xb[c * l + t * stride..c * l + t * stride + k];
                    dst[c * k..(c + 1) * k].copy_from_slice(src);
                }
            }
            kernels::matmul_nt(
                vw.data(),
                &col,
                &mut out[cell * c_out * l_out..(cell + 1) * c_out * l_out],
                c_out,
                c_in * k,
                l_out,
            );
            cols.push(col);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[x, w], Record::Conv1d { x, w, stride, cols }))
    }

    /// Slice `len` columns of the last dim starting at `start`.
    pub fn slice_last_dim(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        let d = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "slice-last-dim",
            shape: s.to_vec(),
            reason: "rank must be >= 1".into(),
        })?;
        if start + len > d || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice-last-dim",
                shape: s.to_vec(),
                reason: format!("slice [{start}, {}) out of range {d}", start + len),
            });
        }
        let rows = va.numel() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * d + start..r * d + start + len]);
        }
        let mut out_shape = s.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, &[a], Record::SliceLastDim { a, start }))
    }

    /// Mean cross-entropy of `logits: [batch, classes]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::InvalidShape {
                op: "cross-entropy",
                shape: s.to_vec(),
                reason: format!("expected [batch={}, classes]", targets.len()),
            });
        }
        let (bsz, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidShape {
                op: "cross-entropy",
                shape: s.to_vec(),
                reason: format!("target {bad} out of range {c}"),
            });
        }
        let mut probs = vec![0.0f32; bsz * c];
        let mut loss = 0.0f64;
        for (bi, &t) in targets.iter().enumerate() {
            let row = &vl.data()[bi * c..(bi + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for (p, &v) in probs[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                let e = (v - max).exp();
                *p = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for p in &mut probs[bi * c..(bi + 1) * c] {
                *p *= inv;
            }
            loss -= ((row[t] - max) as f64) - (sum as f64).ln();
        }
        let value = Tensor::scalar((loss / bsz as f64) as f32);
        Ok(self.push_op(
            value,
            &[logits],
            Record::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients for every reachable node below a scalar root.
    /// Var leaves that the root does not depend on get zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(record) = &node.record else { continue };
            let Some(g) = grads[idx].take() else { continue };
            self.step_backward(record, &node.value, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if node.needs_grad && node.record.is_none() {
                    // var leaf: materialize zeros when unreached
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("leaf grad shape"))
                } else {
                    g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"))
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accum<'g>(
        &self,
        grads: &'g mut Vec<Option<Vec<f32>>>,
        id: NodeId,
    ) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let numel = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn step_backward(
        &self,
        record: &Record,
        out_value: &Tensor,
        g: &[f32],
        grads: &mut Vec<Option<Vec<f32>>>,
    ) {
        match record {
            Record::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: Vec<usize> = out_value.shape()[..out_value.shape().len() - 2].to_vec();
                let offsets: Vec<_> = batch_offsets(&batch, sa, sb, m * k, k * n, m * n).collect();
                if let Some(da) = self.accum(grads, *a) {
                    for &(a_off, b_off, o_off) in &offsets {
                        kernels::matmul_nt(
                            &g[o_off..o_off + m * n],
                            &vb.data()[b_off..b_off + k * n],
                            &mut da[a_off..a_off + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(db) = self.accum(grads, *b) {
                    for &(a_off, b_off, o_off) in &offsets {
                        kernels::matmul_tn(
                            &va.data()[a_off..a_off + m * k],
                            &g[o_off..o_off + m * n],
                            &mut db[b_off..b_off + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            Record::Add { a, b } => {
                for id in [a, b] {
                    let shape = self.value(*id).shape().to_vec();
                    if let Some(d) = self.accum(grads, *id) {
                        accumulate_broadcast(g, out_value.shape(), &shape, d, |_, gv| gv);
                    }
                }
            }
            Record::Mul { a, b } => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(da) = self.accum(grads, *a) {
                    accumulate_broadcast_with(
                        g,
                        out_value.shape(),
                        va.shape(),
                        vb.shape(),
                        vb.data(),
                        da,
                    );
                }
                if let Some(db) = self.accum(grads, *b) {
                    accumulate_broadcast_with(
                        g,
                        out_value.shape(),
                        vb.shape(),
                        va.shape(),
                        va.data(),
                        db,
                    );
                }
            }
            Record::Scale { a, factor } => {
                if let Some(da) = self.accum(grads, *a) {
                    kernels::axpy(*factor, g, da);
                }
            }
            Record::TransposeLastTwo { a } => {
                let s_out = out_value.shape();
                let (m, n) = (s_out[s_out.len() - 2], s_out[s_out.len() - 1]);
                if let Some(da) = self.accum(grads, *a) {
                    let cells = g.len() / (m * n);
                    for c in 0..cells {
                        let base = c * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                da[base + j * m + i] += g[base + i * n + j];
                            }
                        }
                    }
                }
            }
            Record::Gelu { a, inner_tanh } => {
                const C: f32 = 0.797_884_6;
                let va = self.value(*a);
                if let Some(da) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        let x = va.data()[i];
                        let t = inner_tanh[i];
                        let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
                        da[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner);
                    }
                }
            }
            Record::SoftmaxLastDim { a } => {
                let d = *out_value.shape().last().unwrap();
                let rows = out_value.numel() / d;
                let y = out_value.data();
                if let Some(da) = self.accum(grads, *a) {
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f32 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for (o, (yv, gv)) in da[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(yr.iter().zip(gr))
                        {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Record::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let d = vg.numel();
                let rows = vx.numel() / d;
                if let Some(dbias) = self.accum(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            dbias[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dgain) = self.accum(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (vx.data()[r * d + j] - mean[r]) * inv_std[r];
                            dgain[j] += g[r * d + j] * xhat;
                        }
                    }
                }
                if let Some(dx) = self.accum(grads, *x) {
                    let gdata = vg.data();
                    let df = d as f32;
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        let xr = &vx.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            let xhat = (xr[j] - mean[r]) * inv_std[r];
                            let v = gr[j] * gdata[j];
                            dxhat[j] = v;
                            sum_dxhat += v;
                            sum_dxhat_xhat += v * xhat;
                        }
                        for j in 0..d {
                            let xhat = (xr[j] - mean[r]) * inv_std[r];
                            dx[r * d + j] += inv_std[r] / df
                                * (df * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Record::MeanAxis { a, axis } => {
                let s = self.value(*a).shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let count = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let inv = 1.0 / count as f32;
                if let Some(da) = self.accum(grads, *a) {
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for c in 0..count {
                            let base = (o * count + c) * inner;
                            for (dst, gv) in da[base..base + inner].iter_mut().zip(gr) {
                                *dst += gv * inv;
                            }
                        }
                    }
                }
            }
            Record::L1Mean { a, b } => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                let inv = g[0] / va.numel() as f32;
                if let Some(da) = self.accum(grads, *a) {
                    for ((o, x), y) in da.iter_mut().zip(va.data()).zip(vb.data()) {
                        *o += inv * sign(x - y);
                    }
                }
                if let Some(db) = self.accum(grads, *b) {
                    for ((o, x), y) in db.iter_mut().zip(va.data()).zip(vb.data()) {
                        *o -= inv * sign(x - y);
                    }
                }
            }
            Record::CosineLastDim { a, b, rows } => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                let d = *va.shape().last().unwrap();
                if let Some(da) = self.accum(grads, *a) {
                    cosine_backward(g, va.data(), vb.data(), rows, d, da);
                }
                if let Some(db) = self.accum(grads, *b) {
                    let flipped: Vec<(f32, f32, f32)> =
                        rows.iter().map(|&(s, p, q)| (s, q, p)).collect();
                    cosine_backward(g, vb.data(), va.data(), &flipped, d, db);
                }
            }
            Record::LogSigmoid { a } => {
                let va = self.value(*a);
                if let Some(da) = self.accum(grads, *a) {
                    for (i, (o, &x)) in da.iter_mut().zip(va.data()).enumerate() {
                        // d/dx log sigmoid(x) = sigmoid(-x)
                        let s = if x >= 0.0 {
                            let e = (-x).exp();
                            e / (1.0 + e)
                        } else {
                            1.0 / (1.0 + x.exp())
                        };
                        *o += g[i] * s;
                    }
                }
            }
            Record::Embedding { table, indices } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = self.accum(grads, *table) {
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Record::Conv1d { x, w, stride, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let sx = vx.shape();
                let (c_in, l) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let sw = vw.shape();
                let (c_out, k) = (sw[0], sw[2]);
                let l_out = (l - k) / stride + 1;
                let cells = vx.numel() / (c_in * l);
                if let Some(dw) = self.accum(grads, *w) {
                    for cell in 0..cells {
                        kernels::matmul_nn(
                            &g[cell * c_out * l_out..(cell + 1) * c_out * l_out],
                            &cols[cell],
                            dw,
                            c_out,
                            l_out,
                            c_in * k,
                        );
                    }
                }
                if let Some(dx) = self.accum(grads, *x) {
                    let mut dcol = vec![0.0f32; l_out * c_in * k];
                    for cell in 0..cells {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        kernels::matmul_tn(
                            &g[cell * c_out * l_out..(cell + 1) * c_out * l_out],
                            vw.data(),
                            &mut dcol,
                            l_out,
                            c_out,
                            c_in * k,
                        );
                        let dxb = &mut dx[cell * c_in * l..(cell + 1) * c_in * l];
                        for t in 0..l_out {
                            for c in 0..c_in {
                                for kk in 0..k {
                                    dxb[c * l + t * stride + kk] += dcol[t * c_in * k + c * k + kk];
                                }
                            }
                        }
                    }
                }
            }
            Record::SliceLastDim { a, start } => {
                let d_in = *self.value(*a).shape().last().unwrap();
                let len = *out_value.shape().last().unwrap();
                let rows = out_value.numel() / len;
                if let Some(da) = self.accum(grads, *a) {
                    for r in 0..rows {
                        for j in 0..len {
                            da[r * d_in + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Record::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let bsz = targets.len();
                let scale = g[0] / bsz as f32;
                if let Some(dl) = self.accum(grads, *logits) {
                    for (bi, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dl[bi * c + j] += scale * (probs[bi * c + j] - ind);
                        }
                    }
                }
            }
        }
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cosine_backward(
    g: &[f32],
    a: &[f32],
    b: &[f32],
    rows: &[(f32, f32, f32)],
    d: usize,
    out: &mut [f32],
) {
    for (r, &(s, p, q)) in rows.iter().enumerate() {
        let denom = p * q + COSINE_EPS;
        let c = s / denom;
        let ratio = if p > 0.0 { c * q / p } else { 0.0 };
        let gr = g[r];
        for j in 0..d {
            out[r * d + j] += gr * (b[r * d + j] - ratio * a[r * d + j]) / denom;
        }
    }
}

/// Accumulate `g` (over `out_shape`) into `dst` (over `target_shape`),
/// mapping each output element through `f(out_flat, g_value)`.
fn accumulate_broadcast(
    g: &[f32],
    out_shape: &[usize],
    target_shape: &[usize],
    dst: &mut [f32],
    f: impl Fn(usize, f32) -> f32,
) {
    if out_shape == target_shape {
        for (i, (d, gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, *gv);
        }
        return;
    }
    let rank = out_shape.len();
    let strides = broadcast_strides(target_shape, rank);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for (i, gv) in g.iter().enumerate() {
        dst[off] += f(i, *gv);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Gradient of one side of a broadcast `mul`: dst += g * other (broadcast).
fn accumulate_broadcast_with(
    g: &[f32],
    out_shape: &[usize],
    target_shape: &[usize],
    other_shape: &[usize],
    other: &[f32],
    dst: &mut [f32],
) {
    let rank = out_shape.len();
    let other_strides = broadcast_strides(other_shape, rank);
    let target_strides = broadcast_strides(target_shape, rank);
    let mut idx = vec![0usize; rank];
    let (mut t_off, mut o_off) = (0usize, 0usize);
    for gv in g {
        dst[t_off] += gv * other[o_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            t_off += target_strides[d];
            o_off += other_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            t_off -= target_strides[d] * out_shape[d];
            o_off -= other_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Flat offsets of each batch cell for a broadcast batched matmul.
fn batch_offsets<'a>(
    batch: &'a [usize],
    sa: &[usize],
    sb: &[usize],
    a_block: usize,
    b_block: usize,
    o_block: usize,
) -> impl Iterator<Item = (usize, usize, usize)> + 'a {
    let rank = batch.len();
    let a_str = broadcast_strides(&sa[..sa.len() - 2], rank);
    let b_str = broadcast_strides(&sb[..sb.len() - 2], rank);
    let cells: usize = batch.iter().product();
    (0..cells).map(move |flat| {
        let mut rem = flat;
        let mut a_off = 0;
        let mut b_off = 0;
        for d in (0..rank).rev() {
            let coord = rem % batch[d];
            rem /= batch[d];
            a_off += coord * a_str[d];
            b_off += coord * b_str[d];
        }
        (a_off * a_block, b_off * b_block, flat * o_block)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_orthogonal_and_colinear() {
        let mut tape = Tape::new();
        let a = tape.var(tensor(&[2], &[1.0, 0.0]));
        let b = tape.var(tensor(&[2], &[0.0, 1.0]));
        let c = tape.cosine_last_dim(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);

        let a = tape.var(tensor(&[2], &[2.0, 0.0]));
        let b = tape.var(tensor(&[2], &[1.0, 0.0]));
        let c = tape.cosine_last_dim(a, b).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        // -ln(1 + e^0) = -ln 2 = -0.6931471805599453
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = tape.log_sigmoid(x);
        assert!((tape.value(y).item() - (-0.693_147_2)).abs() < 1e-6);
    }

    #[test]
    fn backward_of_square() {
        // d/dw sum(w*w) at w=3 is 6
        let mut tape = Tape::new();
        let w = tape.var(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_constant_root_zeroes_vars() {
        let mut tape = Tape::new();
        let w = tape.var(tensor(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let root = tape.scale(c, 2.0);
        let grads = tape.backward(root).unwrap();
        // w is not reachable from root: gradient exists and is zero
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.var(tensor(&[2], &[1.0, 2.0]));
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.var(tensor(&[2, 3], &[0.0; 6]));
        let b = tape.var(tensor(&[4, 5], &[0.0; 20]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"));
    }

    #[test]
    fn constants_build_no_tape() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert!(!tape.needs_grad(c));
    }

    #[test]
    fn matmul_broadcast_rhs() {
        // [2, 2, 3] x [3, 2]
        let mut tape = Tape::new();
        let a = tape.var(tensor(&[2, 2, 3], &(0..12).map(|v| v as f32).collect::<Vec<_>>()));
        let b = tape.var(tensor(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2, 2]);
        // first row: [0,1,2] -> [0*1+2, 1+2] = [2, 3]
        assert_eq!(&tape.value(c).data()[..2], &[2.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.var(tensor(&[3, 4], &(0..12).map(|v| (v as f32) * 0.37 - 2.0).collect::<Vec<_>>()));
        let s = tape.softmax_last_dim(a).unwrap();
        let v = tape.value(s);
        for r in 0..3 {
            let sum: f32 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(v.data()[r * 4..(r + 1) * 4].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.var(tensor(&[2, 8], &(0..16).map(|v| (v as f32) * 1.3 - 7.0).collect::<Vec<_>>()));
        let gain = tape.var(Tensor::filled(&[8], 1.0));
        let bias = tape.var(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let row = &v.data()[r * 8..(r + 1) * 8];
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn embedding_picks_rows() {
        let mut tape = Tape::new();
        let t = tape.var(tensor(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let e = tape.embedding(t, &[2, 0]).unwrap();
        assert_eq!(tape.value(e).data(), &[4.0, 5.0, 0.0, 1.0]);
        let loss = tape.mean_axis(e, 0).unwrap();
        let loss = tape.mean_axis(loss, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dt = grads.get(t).unwrap();
        // rows 0 and 2 touched, row 1 untouched
        assert_eq!(dt.data()[2..4], [0.0, 0.0]);
        assert!(dt.data()[0] > 0.0 && dt.data()[4] > 0.0);
    }

    #[test]
    fn conv1d_known_values() {
        // x = [1,2,3,4,5], w = [1,1], stride 2 -> [3, 7]
        let mut tape = Tape::new();
        let x = tape.var(tensor(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let w = tape.var(tensor(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d(x, w, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let mut tape = Tape::new();
        let x = tape.var(tensor(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.var(tensor(&[1, 1, 5], &[1.0; 5]));
        assert!(tape.conv1d(x, w, 1).is_err());
    }

    #[test]
    fn slice_last_dim_selects_columns() {
        let mut tape = Tape::new();
        let a = tape.var(tensor(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let s = tape.slice_last_dim(a, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.var(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 4.0f32.ln()).abs() < 1e-6);
    }
}
