//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node. Graphs are single threaded; build
//! one per batch.

use std::collections::HashMap;

use crate::error::{G2pError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gelu_grad_scalar, gelu_scalar, matmul_into, Scalar, Tensor, LAYER_NORM_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    PadRows(Var),
    ShiftRows {
        x: Var,
        shift: isize,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        epsilon: f64,
        probs: Vec<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows(_) => "pad_rows",
            Op::ShiftRows { .. } => "shift_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Returns the node bound to a stored parameter, creating it on first use.
    /// Nodes are keyed by id, so one graph must only ever see one store.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Name and position of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(G2pError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::ZERO; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(G2pError::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a row vector (`[D]` or `[1, D]`) to every row of a `T x D` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.dims2(a)?;
        if self.value(row).numel() != d {
            return Err(G2pError::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        if d > 0 {
            for chunk in t.data_mut().chunks_mut(d) {
                for (v, &b) in chunk.iter_mut().zip(&r) {
                    *v += b;
                }
            }
        }
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(G2pError::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        self.push(t, Op::Gelu(a))
    }

    /// Row-wise softmax of a 2-D tensor. Entries set to negative infinity come
    /// out as exact zeros; a row masked entirely yields zeros.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let mut out = self.value(a).clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(S::from_f64(f64::NEG_INFINITY), S::max);
            if !max.is_finite() {
                row.iter_mut().for_each(|v| *v = S::ZERO);
                continue;
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.dims2(x)?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(G2pError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let dn = S::from_usize(d);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::ZERO; r * d];
        let mut rstd = vec![S::ZERO; r];
        let mut out = vec![S::ZERO; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::ONE / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![r, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Selects rows of a 2-D tensor in the given order (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(G2pError::Index {
                    what: "row",
                    index: i,
                    size: n,
                });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start > end || end > c {
            return Err(G2pError::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| G2pError::shape("concat_cols", &[], &[]))?;
        let (r, _) = self.dims2(first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(G2pError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| G2pError::shape("concat_rows", &[], &[]))?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pc != c {
                return Err(G2pError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start > end || end > r {
            return Err(G2pError::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows < r {
            return Err(G2pError::Length { len: r, max: rows });
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(rows * c, S::ZERO);
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::PadRows(x)))
    }

    /// `out[t] = x[t - shift]` where that row exists, zero otherwise.
    pub fn shift_rows(&mut self, x: Var, shift: isize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let t = shift_rows_tensor(self.value(x), shift)?;
        debug_assert_eq!(t.shape(), &[r, c]);
        Ok(self.push(t, Op::ShiftRows { x, shift }))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize, stride: usize) -> Result<Var> {
        let t = tensor::conv1d(self.value(x), self.value(w), bias.map(|b| self.value(b)), pad, stride)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                bias,
                pad,
                stride,
            },
        ))
    }

    /// Label-smoothed cross-entropy averaged over rows; a `0 x V` input gives 0.
    ///
    /// Target distribution per row: `(1 - epsilon)` on the gold class plus
    /// `epsilon / V` on every class, gold included.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
        let (k, _) = self.dims2(logits)?;
        if targets.len() != k {
            return Err(G2pError::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(G2pError::Config(format!("label smoothing {epsilon} not in [0, 1)")));
        }
        let (loss, probs) = cross_entropy_forward(self.value(logits), targets, epsilon)?;
        Ok(self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                epsilon,
                probs: probs.into_iter().map(S::from_f64).collect(),
            },
        ))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if self.value(output).numel() != 1 {
            return Err(G2pError::shape("backward", self.shape(output), &[1]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![S::ONE]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
                .collect(),
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::ZERO; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a)?;
                let (_, n) = self.dims2(b)?;
                // dA = G B^T, dB = A^T G
                let bt = self.value(b).transpose2()?;
                acc(a, &mut |buf| matmul_into(g, bt.data(), buf, m, n, k));
                let at = self.value(a).transpose2()?;
                acc(b, &mut |buf| matmul_into(at.data(), g, buf, k, m, n));
            }
            &Op::Transpose(a) => {
                let (r, c) = self.dims2(a)?;
                acc(a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                acc(b, &mut |buf| add_into(buf, g));
            }
            &Op::AddRow(a, row) => {
                acc(a, &mut |buf| add_into(buf, g));
                let d = self.value(row).numel();
                acc(row, &mut |buf| {
                    if d > 0 {
                        for chunk in g.chunks(d) {
                            add_into(buf, chunk);
                        }
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(b, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |buf| {
                for (o, &gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            }),
            &Op::Sum(a) => acc(a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                acc(a, &mut |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad_scalar(xi);
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = self.dims2(a)?;
                let y = node.value.data();
                acc(a, &mut |buf| {
                    for i in 0..r {
                        let ys = &y[i * c..(i + 1) * c];
                        let gs = &g[i * c..(i + 1) * c];
                        let dot: S = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            buf[i * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = self.dims2(*x)?;
                let gv = self.value(*gain).data();
                let dn = S::from_usize(d);
                acc(*gain, &mut |buf| {
                    for i in 0..r {
                        for j in 0..d {
                            buf[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for i in 0..r {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        let mut sum_dxh = S::ZERO;
                        let mut sum_dxh_xh = S::ZERO;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            buf[i * d + j] +=
                                rstd[i] / dn * (dn * dxh - sum_dxh - xhat[i * d + j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let (_, d) = self.dims2(*table)?;
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(x)?;
                let w = node.value.shape()[1];
                acc(x, &mut |buf| {
                    for i in 0..r {
                        add_into(&mut buf[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    acc(p, &mut |buf| {
                        for i in 0..rows {
                            add_into(
                                &mut buf[i * pc..(i + 1) * pc],
                                &g[i * total + offset..i * total + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.shape(x)[1];
                acc(x, &mut |buf| add_into(&mut buf[start * c..start * c + g.len()], g));
            }
            &Op::PadRows(x) => {
                let n = self.value(x).numel();
                acc(x, &mut |buf| add_into(buf, &g[..n]));
            }
            &Op::ShiftRows { x, shift } => {
                let (r, c) = self.dims2(x)?;
                acc(x, &mut |buf| {
                    for t in 0..r {
                        let src = t as isize - shift;
                        if src >= 0 && (src as usize) < r {
                            let s = src as usize;
                            add_into(&mut buf[s * c..(s + 1) * c], &g[t * c..(t + 1) * c]);
                        }
                    }
                });
            }
            &Op::Conv1d {
                x,
                w,
                bias,
                pad,
                stride,
            } => {
                let (t, d_in) = self.dims2(x)?;
                let (t_out, d_out) = node.value.dims2()?;
                let k = self.shape(w)[2];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for to in 0..t_out {
                        for j in 0..k {
                            let src = (to * stride + j) as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            for o in 0..d_out {
                                f(to, j, src as usize, o);
                            }
                        }
                    }
                };
                acc(x, &mut |buf| {
                    taps(&mut |to, j, src, o| {
                        let go = g[to * d_out + o];
                        for i in 0..d_in {
                            buf[src * d_in + i] += wv[(o * d_in + i) * k + j] * go;
                        }
                    })
                });
                acc(w, &mut |buf| {
                    taps(&mut |to, j, src, o| {
                        let go = g[to * d_out + o];
                        for i in 0..d_in {
                            buf[(o * d_in + i) * k + j] += xv[src * d_in + i] * go;
                        }
                    })
                });
                if let Some(b) = bias {
                    acc(b, &mut |buf| {
                        for to in 0..t_out {
                            add_into(buf, &g[to * d_out..(to + 1) * d_out]);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                epsilon,
                probs,
            } => {
                let (k, v) = self.dims2(*logits)?;
                if k > 0 {
                    let scale = g[0] / S::from_usize(k);
                    let eps = S::from_f64(*epsilon);
                    let uniform = eps / S::from_usize(v);
                    let gold = S::ONE - eps;
                    acc(*logits, &mut |buf| {
                        for (r, &tgt) in targets.iter().enumerate() {
                            for c in 0..v {
                                let mut q = uniform;
                                if c == tgt {
                                    q += gold;
                                }
                                buf[r * v + c] += (probs[r * v + c] - q) * scale;
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Shifts rows by `shift` (positive = toward later positions), zero filling.
pub fn shift_rows_tensor<S: Scalar>(x: &Tensor<S>, shift: isize) -> Result<Tensor<S>> {
    let (r, c) = x.dims2()?;
    let mut out = Tensor::zeros(&[r, c]);
    for t in 0..r {
        let src = t as isize - shift;
        if src >= 0 && (src as usize) < r {
            let s = src as usize;
            out.data_mut()[t * c..(t + 1) * c].copy_from_slice(x.row(s));
        }
    }
    Ok(out)
}

/// Loss value and softmax probabilities for label-smoothed cross-entropy.
pub(crate) fn cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let (k, v) = logits.dims2()?;
    let mut probs = Vec::with_capacity(k * v);
    let mut total = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt >= v {
            return Err(G2pError::Index {
                what: "target class",
                index: tgt,
                size: v,
            });
        }
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.to_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let uniform = epsilon / v as f64;
        let mut loss = 0.0;
        for (c, &x) in row.iter().enumerate() {
            let logp = x - lse;
            let q = if c == tgt { 1.0 - epsilon + uniform } else { uniform };
            loss -= q * logp;
            probs.push(logp.exp());
        }
        total += loss;
    }
    let mean = if k == 0 { 0.0 } else { total / k as f64 };
    Ok((mean, probs))
}

/// Output of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a node; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Adds parameter gradients into the store. Every trainable parameter ends
    /// up with a populated gradient buffer (zero if unused in this graph).
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for p in store.iter_mut() {
            if p.requires_grad && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for (&id, &var) in &self.params {
            let param = store.get_mut(id);
            if !param.requires_grad {
                continue;
            }
            if let Some(g) = self.get(var) {
                let buf = param.grad.as_mut().expect("initialised above");
                add_into(buf.data_mut(), g.data());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn masked_softmax_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
        let all = g.leaf(Tensor::full(&[1, 2], f64::NEG_INFINITY));
        let z = g.softmax_rows(all).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(x, &[2], 0.0).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(x, &[4], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_empty_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[0, 4]));
        let l = g.cross_entropy(x, &[], 0.1).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn first_non_finite_names_op() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let y = g.scale(x, f64::INFINITY);
        let _ = g.gelu(y);
        assert_eq!(g.first_non_finite(), Some((1, "scale")));
    }
}
