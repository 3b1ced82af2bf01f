//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Recording an operation
//! appends one node holding the forward value; nodes reference their
//! inputs by [`ValueId`], so the arena order is already topological.
//! [`Tape::backward`] walks the arena once in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers.
//!
//! A tape is confined to one rollout or one optimization step; it is not
//! shared across threads.

use super::{Tensor, TensorError};

/// Index of a recorded value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Elu { a: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    MaskedFill { a: usize, mask: Vec<bool> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Reshape { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    SelectRow { a: usize, row: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, stride: usize },
    MaxPool2d { x: usize, argmax: Vec<i64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; values unreached by the loss get zeros.
    pub fn get(&self, id: ValueId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
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

    /// Records a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Records a non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { shape, data, needs_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: ValueId, b: ValueId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── Primitive operations ──────────────────────────────────────────

    /// 2-D matrix product `(m,k) @ (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.mismatch("transpose", a, a));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n, m], out, needs, Op::Transpose { a: a.0 }))
    }

    /// Elementwise sum. `b` may also be a row vector broadcast over a 2-D
    /// `a`, or a scalar broadcast over anything.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let x = self.value(a);
        let y = self.value(b);
        let data = if sa == sb {
            x.iter().zip(y).map(|(p, q)| p + q).collect()
        } else if sa.len() == 2 && sb == [sa[1]] {
            let n = sa[1];
            x.iter().enumerate().map(|(i, p)| p + y[i % n]).collect()
        } else if y.len() == 1 {
            let c = y[0];
            x.iter().map(|p| p + c).collect()
        } else {
            return Err(self.mismatch("add", a, b));
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, data, needs, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(p, q)| p - q)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, needs, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(p, q)| p * q)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, needs, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let data = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, needs, Op::Scale { a: a.0, c })
    }

    fn unary(&mut self, a: ValueId, f: impl Fn(f64) -> f64, op: Op) -> ValueId {
        let data = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, needs, op)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, |v| v.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> ValueId {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { a: a.0, slope })
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn elu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, |v| if v > 0.0 { v } else { v.exp() - 1.0 }, Op::Elu { a: a.0 })
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, gelu, Op::Gelu { a: a.0 })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: ValueId) -> ValueId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax needs at least one axis");
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let needs = self.needs(a);
        self.push(shape, data, needs, Op::Softmax { a: a.0 })
    }

    /// Replaces masked entries with a large negative constant so a
    /// following softmax assigns them exactly zero weight. Gradient flows
    /// only through unmasked entries.
    pub fn masked_fill(&mut self, a: ValueId, mask: &[bool]) -> Result<ValueId, TensorError> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::BadShape {
                op: "masked_fill",
                shape: self.shape(a).to_vec(),
                len: mask.len(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { MASK_VALUE } else { v })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Op::MaskedFill { a: a.0, mask: mask.to_vec() }))
    }

    /// Layer normalization over the last axis with learnable gain/offset.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("layer_norm needs at least one axis");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(n) {
            let (mean, rstd) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            data,
            needs,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
        ))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape,
                len: self.value(a).len(),
            });
        }
        let data = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Op::Reshape { a: a.0 }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        self.push(vec![1], vec![m], needs, Op::Mean { a: a.0 })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = self.value(a).iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], needs, Op::Sum { a: a.0 })
    }

    /// Row `row` of a 2-D tensor, as a vector.
    pub fn select_row(&mut self, a: ValueId, row: usize) -> Result<ValueId, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 || row >= s[0] {
            return Err(TensorError::BadShape {
                op: "select_row",
                shape: s.to_vec(),
                len: row,
            });
        }
        let n = s[1];
        let data = self.value(a)[row * n..(row + 1) * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(vec![n], data, needs, Op::SelectRow { a: a.0, row }))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: s,
                len: start + len,
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(vec![m, len], data, needs, Op::SliceCols { a: a.0, start, len }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let m = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.shape(p)[1];
                data.extend_from_slice(&self.value(p)[i * n..(i + 1) * n]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![m, total],
            data,
            needs,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, n],
            data,
            needs,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    /// Mean cross-entropy between row logits `(batch, classes)` and class
    /// indices, computed via a log-sum-exp that stays finite for any
    /// finite logits.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[usize],
    ) -> Result<ValueId, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                shape: s.to_vec(),
                len: targets.len(),
            });
        }
        let (bsz, classes) = (s[0], s[1]);
        let x = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            debug_assert!(t < classes);
            let row = &x[i * classes..(i + 1) * classes];
            loss += log_sum_exp(row) - row[t];
        }
        loss /= bsz as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
        ))
    }

    /// 2-D convolution, no padding: input `(B,C,H,W)`, filters `(F,C,K,K)`,
    /// bias `(F)`, producing `(B,F,(H-K)/stride+1,(W-K)/stride+1)`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
    ) -> Result<ValueId, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = sx.len() == 4
            && sw.len() == 4
            && sx[1] == sw[1]
            && sw[2] == sw[3]
            && sw[2] <= sx[2]
            && sw[2] <= sx[3]
            && self.shape(b) == [sw[0]];
        if !ok {
            return Err(self.mismatch("conv2d", x, w));
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, k) = (sw[0], sw[2]);
        let oh = (h - k) / stride + 1;
        let ow = (wd - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; bsz * f * oh * ow];
        for bi in 0..bsz {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv[fi];
                        for ci in 0..c {
                            for ky in 0..k {
                                let xrow = ((bi * c + ci) * h + oy * stride + ky) * wd + ox * stride;
                                let wrow = ((fi * c + ci) * k + ky) * k;
                                for kx in 0..k {
                                    acc += xv[xrow + kx] * wv[wrow + kx];
                                }
                            }
                        }
                        out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![bsz, f, oh, ow],
            out,
            needs,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride },
        ))
    }

    /// Max pooling over `(B,C,H,W)` with symmetric zero-count padding.
    /// Padded positions are ignored; a window that covers no real input
    /// yields 0 and routes no gradient.
    pub fn maxpool2d(
        &mut self,
        x: ValueId,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kernel == 0 || kernel > sx[2] + 2 * padding || kernel > sx[3] + 2 * padding {
            return Err(TensorError::BadShape {
                op: "maxpool2d",
                shape: sx,
                len: kernel,
            });
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (wd + 2 * padding - kernel) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![-1i64; bsz * c * oh * ow];
        for bi in 0..bsz {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = -1i64;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let idx = ((bi * c + ci) * h + iy as usize) * wd + ix as usize;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx as i64;
                                }
                            }
                        }
                        let o = ((bi * c + ci) * oh + oy) * ow + ox;
                        out[o] = if best_idx < 0 { 0.0 } else { best };
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![bsz, c, oh, ow],
            out,
            needs,
            Op::MaxPool2d { x: x.0, argmax },
        ))
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded node at most
    /// once, in reverse order of recording.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].clone().expect("checked above");
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, delta: &[f64]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    // dA = dC @ B^T
                    let da = matmul_bt_raw(g, &self.nodes[*b].data, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T @ dC
                    let db = matmul_at_raw(&self.nodes[*a].data, g, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                if self.nodes[*b].needs_grad {
                    let sb = &self.nodes[*b].shape;
                    if *sb == node.shape {
                        self.accumulate(grads, *b, g);
                    } else if self.nodes[*b].data.len() == 1 {
                        self.accumulate(grads, *b, &[g.iter().sum()]);
                    } else {
                        // row-broadcast vector: sum over rows
                        let n = sb[0];
                        let mut db = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            db[i % n] += v;
                        }
                        self.accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                if self.nodes[*b].needs_grad {
                    let db: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(v, q)| v * q)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(v, p)| v * p)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::LeakyRelu { a, slope } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(v, &x)| if x > 0.0 { *v } else { slope * v })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(v, &y)| v * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(v, &y)| v * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Elu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(v, &x)| if x > 0.0 { *v } else { v * x.exp() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(v, &x)| v * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax { a } => {
                let n = *node.shape.last().expect("softmax shape");
                let y = &node.data;
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        da[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::MaskedFill { a, mask } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask)
                    .map(|(v, &m)| if m { 0.0 } else { *v })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let n = *node.shape.last().expect("layer_norm shape");
                let xv = &self.nodes[*x].data;
                let gv = &self.nodes[*gamma].data;
                let rows = xv.len() / n;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mean, rstd) = row_moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(v, w)| v * w).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] =
                            rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g),
            Op::Mean { a } => {
                let n = self.nodes[*a].data.len() as f64;
                let da = vec![g[0] / n; self.nodes[*a].data.len()];
                self.accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[*a].data.len()];
                self.accumulate(grads, *a, &da);
            }
            Op::SelectRow { a, row } => {
                let n = self.nodes[*a].shape[1];
                let mut da = vec![0.0; self.nodes[*a].data.len()];
                da[row * n..(row + 1) * n].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    if self.nodes[p].needs_grad {
                        let n = self.nodes[p].shape[1];
                        let mut dp = vec![0.0; m * n];
                        for i in 0..m {
                            dp[i * n..(i + 1) * n]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + n]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += self.nodes[p].shape[1];
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].needs_grad {
                        self.accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = self.nodes[*logits].shape[1];
                let bsz = targets.len();
                let xv = &self.nodes[*logits].data;
                let mut da = vec![0.0; xv.len()];
                let scale = g[0] / bsz as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let row = &xv[i * classes..(i + 1) * classes];
                    let mut probs = row.to_vec();
                    softmax_row(&mut probs);
                    for j in 0..classes {
                        let delta = if j == t { 1.0 } else { 0.0 };
                        da[i * classes + j] = (probs[j] - delta) * scale;
                    }
                }
                self.accumulate(grads, *logits, &da);
            }
            Op::Conv2d { x, w, b, stride } => {
                let sx = &self.nodes[*x].shape;
                let sw = &self.nodes[*w].shape;
                let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, k) = (sw[0], sw[2]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let xv = &self.nodes[*x].data;
                let wv = &self.nodes[*w].data;
                let need_x = self.nodes[*x].needs_grad;
                let need_w = self.nodes[*w].needs_grad;
                let need_b = self.nodes[*b].needs_grad;
                let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
                let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
                let mut db = vec![0.0; if need_b { f } else { 0 }];
                for bi in 0..bsz {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((bi * f + fi) * oh + oy) * ow + ox];
                                if need_b {
                                    db[fi] += go;
                                }
                                for ci in 0..c {
                                    for ky in 0..k {
                                        let xrow = ((bi * c + ci) * h + oy * stride + ky) * wd
                                            + ox * stride;
                                        let wrow = ((fi * c + ci) * k + ky) * k;
                                        for kx in 0..k {
                                            if need_x {
                                                dx[xrow + kx] += go * wv[wrow + kx];
                                            }
                                            if need_w {
                                                dw[wrow + kx] += go * xv[xrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, &dx);
                }
                if need_w {
                    self.accumulate(grads, *w, &dw);
                }
                if need_b {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src >= 0 {
                        dx[src as usize] += g[o];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
        }
    }
}

const MASK_VALUE: f64 = -1.0e9;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `C = A @ B` for row-major `(m,k)` and `(k,n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `C = A^T @ B` where `A` is `(m,k)` and `B` is `(m,n)`, giving `(k,n)`.
fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `C = A @ B^T` where `A` is `(m,n)` and `B` is `(k,n)`, giving `(m,k)`.
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}
