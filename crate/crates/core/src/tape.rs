//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients into every node that depends on a `requires_grad` leaf. A fresh
//! tape is built for every forward pass; parameters are copied in as leaves and
//! their gradients read back out after the backward sweep.

use std::ops::Range;

use crate::tensor::{gemm, BoolMask, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    MulCols {
        x: Var,
        r: Var,
        mask: Option<BoolMask>,
    },
    Scale(Var, f64),
    ScaleDiag(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    PointerNll {
        probs: Var,
        targets: Vec<Option<usize>>,
        eps: f64,
        normalizer: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// 0.5·(1 + tanh(u)) = sigmoid(2u), which needs a single exp.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to the trainable
    /// leaf `v`. Intermediate gradients are not retained.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            (av.data(), k, 1),
            (bv.data(), 1, k),
            (&mut out, n, 1),
            false,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, d) = xv.dims2("add_row_bias")?;
        if bv.numel() != d {
            return Err(mismatch("add_row_bias", xv, bv));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `out[i][j] = x[i][j] · r[j]`. When a mask is given, masked entries pass
    /// through unscaled.
    pub fn mul_cols(&mut self, x: Var, r: Var, mask: Option<&BoolMask>) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (n, m) = xv.dims2("mul_cols")?;
        if rv.numel() != m {
            return Err(mismatch("mul_cols", xv, rv));
        }
        if let Some(mask) = mask {
            if mask.shape() != [n, m] {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_cols",
                    left: xv.shape().to_vec(),
                    right: mask.shape().to_vec(),
                });
            }
        }
        let gate = rv.data();
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                if mask.map_or(true, |mk| mk.is_visible(i, j)) {
                    data[i * m + j] *= gate[j];
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let op = Op::MulCols {
            x,
            r,
            mask: mask.cloned(),
        };
        Ok(self.push(out, op, &[x, r]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Multiplies the main diagonal of a square matrix by `factor`.
    pub fn scale_diag(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2("scale_diag")?;
        if n != m {
            return Err(mismatch("scale_diag", xv, xv));
        }
        let mut out = xv.clone();
        for i in 0..n {
            let v = out.at(i, i);
            out.set(i, i, v * factor);
        }
        Ok(self.push(out, Op::ScaleDiag(x, factor), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel().max(1) as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Concatenates matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), pv));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2("concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), pv));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rectangular sub-block of a matrix.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2("slice")?;
        if rows.end > n || rows.start > rows.end {
            return Err(TensorError::OutOfRange {
                op: "slice rows",
                index: rows.end,
                len: n,
            });
        }
        if cols.end > m || cols.start > cols.end {
            return Err(TensorError::OutOfRange {
                op: "slice cols",
                index: cols.end,
                len: m,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&xv.row(i)[cols.clone()]);
        }
        let out = Tensor::matrix(rows.len(), cols.len(), data)?;
        Ok(self.push(out, Op::Slice { x, rows, cols }, &[x]))
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "embedding",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    /// Row-wise softmax over the visible entries of `mask`. Masked entries
    /// come out as exact zeros. Each row is shifted by its maximum visible
    /// logit before exponentiation.
    pub fn masked_softmax(&mut self, logits: Var, mask: &BoolMask) -> Result<Var> {
        let out = masked_softmax_values(self.value(logits), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(logits), &[logits]))
    }

    /// Per-row layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let xv = self.value(x);
        let (n, d) = xv.dims2("layer_norm")?;
        if d == 0 {
            return Err(TensorError::Contract("layer_norm over zero features".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.numel() != d {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                normalized[i * d + j] = h;
                out[i * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    /// Mean next-token cross-entropy (nats) of `logits` rows against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = lv.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::Contract("cross_entropy over zero rows".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut mean = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: v,
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            let nll = z.ln() + max - row[t];
            // running mean: identical per-row losses average to themselves exactly
            mean += (nll - mean) / (i + 1) as f64;
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(mean), op, &[logits]))
    }

    /// `-Σ_t log(probs[t][target_t] + eps) / normalizer` over rows with a target.
    pub fn pointer_nll(
        &mut self,
        probs: Var,
        targets: &[Option<usize>],
        eps: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let pv = self.value(probs);
        let (n, m) = pv.dims2("pointer_nll")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "pointer_nll",
                left: pv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (t, target) in targets.iter().enumerate() {
            if let Some(j) = *target {
                if j >= m {
                    return Err(TensorError::OutOfRange {
                        op: "pointer_nll",
                        index: j,
                        len: m,
                    });
                }
                total -= (pv.at(t, j) + eps).ln();
            }
        }
        let op = Op::PointerNll {
            probs,
            targets: targets.to_vec(),
            eps,
            normalizer,
        };
        Ok(self.push(Tensor::scalar(total / normalizer), op, &[probs]))
    }

    /// Populates gradients of the scalar `loss` for every node that depends on
    /// a `requires_grad` leaf. Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = G · Bᵀ
                    gemm((m, n, k), (g, n, 1), (bv.data(), 1, n), (ga, k, 1), true);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB = Aᵀ · G
                    gemm((k, m, n), (av.data(), 1, k), (g, n, 1), (gb, n, 1), true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = G · B
                    gemm((m, n, k), (g, n, 1), (bv.data(), k, 1), (ga, k, 1), true);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB = Gᵀ · A
                    gemm((n, m, k), (g, 1, n), (av.data(), k, 1), (gb, k, 1), true);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let (r, c) = (out.rows(), out.cols());
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(v, grads) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::MulCols { x, r, mask } => {
                let (xv, rv) = (self.value(*x), self.value(*r).data());
                let (n, m) = (xv.rows(), xv.cols());
                let visible = |i: usize, j: usize| mask.as_ref().map_or(true, |mk| mk.is_visible(i, j));
                if let Some(gx) = self.slot(*x, grads) {
                    for i in 0..n {
                        for j in 0..m {
                            let f = if visible(i, j) { rv[j] } else { 1.0 };
                            gx[i * m + j] += g[i * m + j] * f;
                        }
                    }
                }
                if let Some(gr) = self.slot(*r, grads) {
                    for i in 0..n {
                        for j in 0..m {
                            if visible(i, j) {
                                gr[j] += g[i * m + j] * xv.data()[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, *f);
                }
            }
            Op::ScaleDiag(x, f) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let n = out.rows();
                    axpy(gx, g, 1.0);
                    for i in 0..n {
                        gx[i * n + i] += g[i * n + i] * (f - 1.0);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gi), s) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * s * (1.0 - s);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * gi * xi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let s = g[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(p, grads) {
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + w];
                            axpy(&mut gp[i * w..(i + 1) * w], src, 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(p, grads) {
                        axpy(gp, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, rows, cols } => {
                let m = self.value(*x).cols();
                let w = cols.len();
                if let Some(gx) = self.slot(*x, grads) {
                    for (k, i) in rows.clone().enumerate() {
                        let dst = &mut gx[i * m + cols.start..i * m + cols.end];
                        axpy(dst, &g[k * w..(k + 1) * w], 1.0);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.slot(*table, grads) {
                    for (k, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d], 1.0);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let m = out.cols();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, y) in out.data().chunks(m).enumerate() {
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gx[i * m + j] += y[j] * (gr[j] - dot);
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
                let d = out.cols();
                let n = out.rows();
                let gain_v = self.value(*gain).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for i in 0..n {
                        let h = &normalized[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let s = inv_std[i] / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += s * (d as f64 * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(*gain, grads) {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * normalized[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let s = g[0] / targets.len() as f64;
                if let Some(gl) = self.slot(*logits, grads) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * v + j] += s * (probs[i * v + j] - y);
                        }
                    }
                }
            }
            Op::PointerNll {
                probs,
                targets,
                eps,
                normalizer,
            } => {
                let pv = self.value(*probs);
                let m = pv.cols();
                if let Some(gp) = self.slot(*probs, grads) {
                    for (t, target) in targets.iter().enumerate() {
                        if let Some(j) = *target {
                            gp[t * m + j] -= g[0] / ((pv.at(t, j) + eps) * normalizer);
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use. `None` when `v`
    /// does not lead back to a trainable leaf.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Forward masked softmax on plain tensors.
pub fn masked_softmax_values(logits: &Tensor, mask: &BoolMask) -> Result<Tensor> {
    let (n, m) = logits.dims2("masked_softmax")?;
    if mask.shape() != [n, m] {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax",
            left: logits.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    if let Some(row) = mask.first_empty_row() {
        return Err(TensorError::Contract(format!(
            "softmax row {row} has no visible entry"
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = logits.row(i);
        let vis = mask.row(i);
        let max = row
            .iter()
            .zip(vis)
            .filter(|(_, &v)| v)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..m {
            if vis[j] {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                z += e;
            }
        }
        for v in &mut out[i * m..(i + 1) * m] {
            *v /= z;
        }
    }
    Tensor::matrix(n, m, out)
}
