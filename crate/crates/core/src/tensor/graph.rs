use super::kernels;
use super::Tensor;
use crate::error::{HmtError, Result};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ColMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceBlock {
        x: Var,
        row0: usize,
        col0: usize,
    },
    Sum(Var),
    SumRows(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive applications. Node ids are allocated in
/// execution order, so the record is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_tensor(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, kind: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HmtError::NonFinite(op));
        }
        let requires_grad = self.inputs(&kind).iter().any(|i| self.nodes[i.0].value.requires_grad);
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op: kind });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::SoftmaxCols(x)
            | Op::Sum(x)
            | Op::SumRows(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ColMaxPool { x, .. } | Op::SliceBlock { x, .. } => vec![*x],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (q2, s) = self.dims(b);
        if q != q2 {
            return Err(HmtError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul(self.data(a), self.data(b), p, q, s);
        self.push("matmul", vec![p, s], c, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (s, q2) = self.dims(b);
        if q != q2 {
            return Err(HmtError::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul_bt(self.data(a), self.data(b), p, q, s);
        self.push("matmul_bt", vec![p, s], c, Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.dims(x);
        let t = kernels::transpose(self.data(x), p, q);
        self.push("transpose", vec![q, p], t, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HmtError::dim("add", self.shape(a), self.shape(b)));
        }
        let c = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, c, Op::Add(a, b))
    }

    /// Adds the length-`q` vector `row` to every row of `x[p×q]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (p, q) = self.dims(x);
        let (r, q2) = self.dims(row);
        if r != 1 || q != q2 {
            return Err(HmtError::dim("add_row", self.shape(x), self.shape(row)));
        }
        let b = self.data(row);
        let c = self
            .data(x)
            .chunks(q)
            .flat_map(|xr| xr.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        self.push("add_row", vec![p, q], c, Op::AddRow(x, row))
    }

    /// `x · w + b`, row-wise.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HmtError::dim("mul", self.shape(a), self.shape(b)));
        }
        let c = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, c, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, c, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let c = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, c, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, c, Op::Gelu(x))
    }

    /// Row-wise softmax. With `allow`, entries where `allow` is 0 are excluded
    /// from normalisation and come out as exactly 0.
    pub fn softmax_rows(&mut self, x: Var, allow: Option<&Tensor>) -> Result<Var> {
        let (p, q) = self.dims(x);
        let mask: Option<Vec<bool>> = match allow {
            Some(a) => {
                if a.dims2() != (p, q) {
                    return Err(HmtError::dim("softmax_rows", self.shape(x), a.shape()));
                }
                Some(a.data().iter().map(|&v| v != 0.0).collect())
            }
            None => None,
        };
        let data = self.data(x);
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            let row_mask = mask.as_ref().map(|m| &m[i * q..(i + 1) * q]);
            let row = kernels::softmax_row(&data[i * q..(i + 1) * q], row_mask)
                .ok_or(HmtError::DegenerateRow { row: i })?;
            out.extend(row);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax_rows", shape, out, Op::SoftmaxRows(x))
    }

    /// Softmax down each column independently.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.dims(x);
        let t = kernels::transpose(self.data(x), p, q);
        let mut out_t = Vec::with_capacity(p * q);
        for j in 0..q {
            out_t.extend(kernels::softmax_row(&t[j * p..(j + 1) * p], None).expect("unmasked"));
        }
        let out = kernels::transpose(&out_t, q, p);
        let shape = self.shape(x).to_vec();
        self.push("softmax_cols", shape, out, Op::SoftmaxCols(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (p, d) = self.dims(x);
        if self.nodes[gain.0].value.numel() != d || self.nodes[bias.0].value.numel() != d {
            return Err(HmtError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(HmtError::Config("layer_norm eps must be positive".into()));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(p * d);
        let mut inv_std = Vec::with_capacity(p);
        let mut out = Vec::with_capacity(p * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Column-wise max over the selected rows (all rows when `rows` is None).
    /// Ties resolve to the lowest row index.
    pub fn col_max_pool(&mut self, x: Var, rows: Option<&[bool]>) -> Result<Var> {
        let (p, d) = self.dims(x);
        if let Some(sel) = rows {
            if sel.len() != p {
                return Err(HmtError::dim("col_max_pool", self.shape(x), &[sel.len()]));
            }
        }
        let selected: Vec<usize> = (0..p).filter(|&i| rows.is_none_or(|s| s[i])).collect();
        let Some(&first) = selected.first() else {
            return Err(HmtError::EmptyPool);
        };
        let data = self.data(x);
        let mut argmax = vec![first; d];
        let mut out = data[first * d..(first + 1) * d].to_vec();
        for &i in &selected[1..] {
            for j in 0..d {
                let v = data[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push("col_max_pool", vec![d], out, Op::ColMaxPool { x, argmax })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(HmtError::Config("concat_rows of nothing".into()));
        };
        let (_, q) = self.dims(first);
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let (p, q2) = self.dims(v);
            if q2 != q {
                return Err(HmtError::dim("concat_rows", self.shape(first), self.shape(v)));
            }
            rows += p;
            data.extend_from_slice(self.data(v));
        }
        self.push("concat_rows", vec![rows, q], data, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(HmtError::Config("concat_cols of nothing".into()));
        };
        let (p, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let (p2, q) = self.dims(v);
            if p2 != p {
                return Err(HmtError::dim("concat_cols", self.shape(first), self.shape(v)));
            }
            widths.push(q);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(p * total);
        for i in 0..p {
            for (&v, &q) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(v)[i * q..(i + 1) * q]);
            }
        }
        self.push("concat_cols", vec![p, total], data, Op::ConcatCols(parts.to_vec()))
    }

    /// The `rows × cols` block of `x` starting at `(row0, col0)`.
    pub fn slice_block(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (p, q) = self.dims(x);
        if rows == 0 || cols == 0 || row0 + rows > p || col0 + cols > q {
            return Err(HmtError::dim("slice_block", self.shape(x), &[row0, rows, col0, cols]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            data.extend_from_slice(&src[i * q + col0..i * q + col0 + cols]);
        }
        self.push("slice_block", vec![rows, cols], data, Op::SliceBlock { x, row0, col0 })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, q) = self.dims(x);
        self.slice_block(x, start, len, 0, q)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (p, _) = self.dims(x);
        self.slice_block(x, 0, p, start, len)
    }

    /// Row `i` of `x` as a `1×q` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    /// Column sums of `x[p×q]`, shape `[q]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, q) = self.dims(x);
        let mut out = vec![0.0; q];
        for row in self.data(x).chunks(q) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push("sum_rows", vec![q], out, Op::SumRows(x))
    }

    /// `-ln softmax(logits)[label]`, stabilised by max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.data(logits);
        if label >= z.len() {
            return Err(HmtError::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, label, probs },
        )
    }

    /// Reverse pass from a scalar. Gradients accumulate into every leaf that
    /// requires them; calling twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(HmtError::Rank(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            for (input, contrib) in self.vjp(id, &g) {
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (p, q) = self.dims(*a);
                let (_, s) = self.dims(*b);
                let ga = kernels::matmul_bt(g, self.data(*b), p, s, q);
                let gb = kernels::matmul_at(self.data(*a), g, p, q, s);
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMulBt(a, b) => {
                // c = a·bᵀ, a[p×q], b[s×q]
                let (p, q) = self.dims(*a);
                let (s, _) = self.dims(*b);
                let ga = kernels::matmul(g, self.data(*b), p, s, q);
                let gb = kernels::matmul_at(g, self.data(*a), p, s, q);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let (p, q) = self.dims(*x);
                vec![(*x, kernels::transpose(g, q, p))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(x, row) => {
                let (_, q) = self.dims(*x);
                let mut gr = vec![0.0; q];
                for chunk in g.chunks(q) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*row, gr)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(u, v)| u * v).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(u, v)| u * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(u, &v)| u * kernels::gelu_grad(v))
                    .collect();
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => {
                let (_, q) = self.dims(*x);
                let mut gx = Vec::with_capacity(g.len());
                for (yr, gr) in out.chunks(q).zip(g.chunks(q)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, u)| y * u).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, u)| y * (u - dot)));
                }
                vec![(*x, gx)]
            }
            Op::SoftmaxCols(x) => {
                let (p, q) = self.dims(*x);
                let mut gx = vec![0.0; p * q];
                for j in 0..q {
                    let dot: f64 = (0..p).map(|i| out[i * q + j] * g[i * q + j]).sum();
                    for i in 0..p {
                        gx[i * q + j] = out[i * q + j] * (g[i * q + j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (_, d) = self.dims(*x);
                let gn = self.data(*gain);
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (i, gr) in g.chunks(d).enumerate() {
                    let xh = &xhat[i * d..(i + 1) * d];
                    let dxh: Vec<f64> = gr.iter().zip(gn).map(|(u, w)| u * w).collect();
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let k = inv_std[i] / d as f64;
                    for j in 0..d {
                        gx.push(k * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh));
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::ColMaxPool { x, argmax } => {
                let (p, d) = self.dims(*x);
                let mut gx = vec![0.0; p * d];
                for (j, &i) in argmax.iter().enumerate() {
                    gx[i * d + j] += g[j];
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&v| {
                        let n = self.nodes[v.0].value.numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (v, piece)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (p, total) = node.value.dims2();
                let mut col = 0;
                parts
                    .iter()
                    .map(|&v| {
                        let (_, q) = self.dims(v);
                        let mut piece = Vec::with_capacity(p * q);
                        for i in 0..p {
                            piece.extend_from_slice(&g[i * total + col..i * total + col + q]);
                        }
                        col += q;
                        (v, piece)
                    })
                    .collect()
            }
            Op::SliceBlock { x, row0, col0 } => {
                let (p, q) = self.dims(*x);
                let (rows, cols) = node.value.dims2();
                let mut gx = vec![0.0; p * q];
                for i in 0..rows {
                    let dst = (row0 + i) * q + col0;
                    gx[dst..dst + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::SumRows(x) => {
                let (p, _) = self.dims(*x);
                vec![(*x, g.repeat(p))]
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gx = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| g[0] * (pj - if j == *label { 1.0 } else { 0.0 }))
                    .collect();
                vec![(*logits, gx)]
            }
        }
    }
}
