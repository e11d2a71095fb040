use std::borrow::Cow;

use crate::error::{NritError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GatherCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    OverrideRow {
        x: NodeId,
        row: usize,
        replacement: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add-row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Attention { .. } => "attention",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::SliceRows { .. } => "slice",
            Op::GatherCols { .. } => "gather-cols",
            Op::ConcatRows(..) => "concat",
            Op::OverrideRow { .. } => "override-at",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations recorded in evaluation order.
///
/// Parameter leaves borrow their values from a [`ParamStore`], so a graph
/// lives no longer than the store it reads from. Node ids are only valid for
/// the graph that issued them.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.push(Cow::Borrowed(store.value(id)), Op::Param(id), true)
    }

    /// A parameter read as a constant: no gradient flows to it.
    pub fn frozen_param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.push(Cow::Borrowed(store.value(id)), Op::Constant, false)
    }

    /// A leaf whose gradient is recorded (e.g. an activation override).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Input, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NritError::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    /// `x (n x m) + b (m)` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, m) = self.dims(x);
        if self.value(b).len() != m {
            return Err(NritError::Shape(format!(
                "add-row bias {:?} vs width {m}",
                self.value(b).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push_op(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NritError::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Scale(x, c), &[x])
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims(a);
        let vb = self.value(b);
        if vb.shape().len() != 2 || vb.shape()[0] != k {
            return Err(NritError::Shape(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                vb.shape()
            )));
        }
        let m = vb.shape()[1];
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            Layout::Normal,
            vb.data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let m = out.cols();
        for row in out.data_mut().chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        self.push_op(out, Op::Softmax(x), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.ln()).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Log(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width `m`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims(x);
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(NritError::Shape(format!("layer-norm affine width vs {m}")));
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &vx[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let xh = (row[c] - mean) * rs;
                xhat[r * m + c] = xh;
                out[r * m + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q` is `nq x d`, `k` and `v` are `nk x d` with `nk >= nq`; the queries
    /// are the last `nq` positions of the key sequence, so query `i` sees keys
    /// `0..=i + (nk - nq)`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) || nk < nq || heads == 0 || d % heads != 0 {
            return Err(NritError::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let dh = d / heads;
        let offset = nk - nq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            extract_head(vq, nq, d, h, dh, &mut qh);
            extract_head(vk, nk, d, h, dh, &mut kh);
            extract_head(vv, nk, d, h, dh, &mut vh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dh, nk, &qh, Layout::Normal, &kh, Layout::Transposed, 0.0, p);
            for i in 0..nq {
                let visible = i + offset + 1;
                let row = &mut p[i * nk..(i + 1) * nk];
                for s in row[..visible].iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(&mut row[..visible]);
                row[visible..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm(nq, nk, dh, p, Layout::Normal, &vh, Layout::Normal, 0.0, &mut oh);
            scatter_head(&oh, nq, d, h, dh, &mut out);
        }
        let out = Tensor::new(vec![nq, d], out)?;
        Ok(self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, m) = self.dims(table);
        if ids.is_empty() {
            return Err(NritError::Shape("embedding of empty id list".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            if i >= rows {
                return Err(NritError::Index(format!("embedding row {i} of {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), m], out)?;
        Ok(self.push_op(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, m) = self.dims(logits);
        if targets.len() != n {
            return Err(NritError::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(NritError::Index(format!("target class {t} of {m}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_exact_mut(m).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[r]].ln();
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, m) = self.dims(x);
        if start >= end || end > n {
            return Err(NritError::Index(format!("slice {start}..{end} of {n} rows")));
        }
        let data = self.value(x).data()[start * m..end * m].to_vec();
        let out = Tensor::new(vec![end - start, m], data)?;
        Ok(self.push_op(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `cols` of every row, in the given order.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (n, m) = self.dims(x);
        if cols.is_empty() {
            return Err(NritError::Shape("gather of zero columns".into()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= m) {
            return Err(NritError::Index(format!("column {c} of {m}")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            let row = v.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(vec![n, cols.len()], data)?;
        Ok(self.push_op(
            out,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ma) = self.dims(a);
        let (nb, mb) = self.dims(b);
        if ma != mb {
            return Err(NritError::Shape(format!("concat widths {ma} vs {mb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![na + nb, ma], data)?;
        Ok(self.push_op(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// `x` with row `row` replaced by `replacement`.
    pub fn override_row(&mut self, x: NodeId, row: usize, replacement: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims(x);
        if row >= n {
            return Err(NritError::Index(format!("override row {row} of {n}")));
        }
        if self.value(replacement).len() != m {
            return Err(NritError::Shape(format!(
                "override of width {m} with {:?}",
                self.value(replacement).shape()
            )));
        }
        let mut out = self.value(x).clone();
        out.row_mut(row)
            .copy_from_slice(self.value(replacement).data());
        Ok(self.push_op(
            out,
            Op::OverrideRow {
                x,
                row,
                replacement,
            },
            &[x, replacement],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Backward> {
        if !self.value(loss).is_scalar() {
            return Err(NritError::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !upstream.all_finite() {
                return Err(NritError::numeric(
                    format!("node {idx} ({})", node.op.name()),
                    "non-finite gradient",
                ));
            }
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Backward { grads })
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let acc = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, up.clone(), grads);
                acc(*b, up.clone(), grads);
            }
            Op::AddRow(x, b) => {
                acc(*x, up.clone(), grads);
                let m = up.cols();
                let mut gb = vec![0.0; m];
                for row in up.data().chunks_exact(m) {
                    for (g, u) in gb.iter_mut().zip(row) {
                        *g += u;
                    }
                }
                acc(*b, like(*b, gb), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = up.data().iter().zip(vb).map(|(u, y)| u * y).collect();
                let gb = up.data().iter().zip(va).map(|(u, x)| u * x).collect();
                acc(*a, like(*a, ga), grads);
                acc(*b, like(*b, gb), grads);
            }
            Op::Scale(x, c) => {
                let g = up.data().iter().map(|u| u * c).collect();
                acc(*x, like(*x, g), grads);
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, up.data(), Layout::Normal, self.value(*b).data(), Layout::Transposed, 0.0, &mut ga);
                    acc(*a, like(*a, ga), grads);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a).data(), Layout::Transposed, up.data(), Layout::Normal, 0.0, &mut gb);
                    acc(*b, like(*b, gb), grads);
                }
            }
            Op::Gelu(x) => {
                let g = up
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(u, &a)| u * gelu_grad(a))
                    .collect();
                acc(*x, like(*x, g), grads);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), ur) in g.chunks_exact_mut(m).zip(y.chunks_exact(m)).zip(up.data().chunks_exact(m)) {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gr[c] = yr[c] * (ur[c] - dot);
                    }
                }
                acc(*x, like(*x, g), grads);
            }
            Op::Log(x) => {
                let g = up
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(u, a)| u / a)
                    .collect();
                acc(*x, like(*x, g), grads);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, like(*x, vec![up.item(); n]), grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, m) = self.dims(*x);
                let g = self.value(*gamma).data();
                let mut gx = vec![0.0; n * m];
                let mut gg = vec![0.0; m];
                let mut gbeta = vec![0.0; m];
                for r in 0..n {
                    let u = &up.data()[r * m..(r + 1) * m];
                    let xh = &xhat[r * m..(r + 1) * m];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..m {
                        let d = u[c] * g[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                        gg[c] += u[c] * xh[c];
                        gbeta[c] += u[c];
                    }
                    mean_d /= m as f64;
                    mean_dx /= m as f64;
                    for c in 0..m {
                        let d = u[c] * g[c];
                        gx[r * m + c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, like(*x, gx), grads);
                acc(*gamma, like(*gamma, gg), grads);
                acc(*beta, like(*beta, gbeta), grads);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, up, &mut |id, t, gs| acc(id, t, gs), grads),
            Op::Embedding { table, ids } => {
                let (rows, m) = self.dims(*table);
                let mut g = vec![0.0; rows * m];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..m {
                        g[i * m + c] += up.data()[r * m + c];
                    }
                }
                acc(*table, like(*table, g), grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, m) = self.dims(*logits);
                let s = up.item() / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * m + t] -= s;
                }
                acc(*logits, like(*logits, g), grads);
            }
            Op::SliceRows { x, start } => {
                let m = up.cols();
                let mut g = vec![0.0; self.value(*x).len()];
                g[start * m..start * m + up.len()].copy_from_slice(up.data());
                acc(*x, like(*x, g), grads);
            }
            Op::GatherCols { x, cols } => {
                let (n, m) = self.dims(*x);
                let w = cols.len();
                let mut g = vec![0.0; n * m];
                for r in 0..n {
                    for (j, &c) in cols.iter().enumerate() {
                        g[r * m + c] += up.data()[r * w + j];
                    }
                }
                acc(*x, like(*x, g), grads);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                acc(*a, like(*a, up.data()[..na].to_vec()), grads);
                acc(*b, like(*b, up.data()[na..].to_vec()), grads);
            }
            Op::OverrideRow {
                x,
                row,
                replacement,
            } => {
                let mut gx = up.clone();
                gx.row_mut(*row).iter_mut().for_each(|v| *v = 0.0);
                acc(*x, gx, grads);
                acc(*replacement, like(*replacement, up.row(*row).to_vec()), grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[f64],
        up: &Tensor,
        acc: &mut dyn FnMut(NodeId, Tensor, &mut [Option<Tensor>]),
        grads: &mut [Option<Tensor>],
    ) {
        let (nq, d) = self.dims(q);
        let nk = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut goh = vec![0.0; nq * dh];
        let mut dp = vec![0.0; nq * nk];
        let mut tmp_q = vec![0.0; nq * dh];
        let mut tmp_k = vec![0.0; nk * dh];
        for h in 0..heads {
            extract_head(vq, nq, d, h, dh, &mut qh);
            extract_head(vk, nk, d, h, dh, &mut kh);
            extract_head(vv, nk, d, h, dh, &mut vh);
            extract_head(up.data(), nq, d, h, dh, &mut goh);
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV = P^T dO
            gemm(nk, nq, dh, p, Layout::Transposed, &goh, Layout::Normal, 0.0, &mut tmp_k);
            scatter_head(&tmp_k, nk, d, h, dh, &mut gv);
            // dP = dO V^T, then through the softmax
            gemm(nq, dh, nk, &goh, Layout::Normal, &vh, Layout::Transposed, 0.0, &mut dp);
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(nq, nk, dh, &dp, Layout::Normal, &kh, Layout::Normal, 0.0, &mut tmp_q);
            scatter_head(&tmp_q, nq, d, h, dh, &mut gq);
            gemm(nk, nq, dh, &dp, Layout::Transposed, &qh, Layout::Normal, 0.0, &mut tmp_k);
            scatter_head(&tmp_k, nk, d, h, dh, &mut gk);
        }
        let shape = |id: NodeId| self.value(id).shape().to_vec();
        acc(q, Tensor::new(shape(q), gq).expect("shape"), grads);
        acc(k, Tensor::new(shape(k), gk).expect("shape"), grads);
        acc(v, Tensor::new(shape(v), gv).expect("shape"), grads);
    }
}

/// Gradients from one backward sweep, per node.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient with respect to a node, or `None` when the node does not
    /// influence the loss or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a node, zero-filled when it is unreachable.
    pub fn grad_or_zero(&self, graph: &Graph<'_>, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Parameter gradients, keyed by parameter id.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Gradients {
        let mut out = Gradients::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref())) {
                out.push(*pid, g.clone());
            }
        }
        out
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn extract_head(src: &[f64], n: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..n {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], n: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..n {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}
