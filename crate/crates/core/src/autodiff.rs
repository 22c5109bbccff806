//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order. Each recorded
//! node owns its forward value; [`Tape::backward`] walks the nodes in
//! strict reverse order and accumulates vector-Jacobian products into a
//! [`Gradients`] buffer. A tape is built fresh for every training step and
//! dropped afterwards.
//!
//! Leaves come in two flavours. Dense leaves receive an ordinary gradient
//! buffer of the same shape. Sparse leaves are embedding tables: they may
//! only be read through [`Tape::embedding_gather`] and their gradient is a
//! [`SparseRows`] map holding only the rows that were touched.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Dense,
    Sparse,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    Constant,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
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
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Row-sparse gradient of an embedding table, keyed by row index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    width: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    /// Rows in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }

    fn accumulate(&mut self, row: usize, g: &[f64]) {
        let slot = self
            .rows
            .entry(row)
            .or_insert_with(|| vec![0.0; self.width]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    /// Dense `(rows, width)` buffer with the untouched rows zero.
    pub fn to_dense(&self, total_rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; total_rows * self.width];
        for (r, g) in &self.rows {
            out[r * self.width..(r + 1) * self.width].copy_from_slice(g);
        }
        out
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    dense: Vec<Option<Vec<f64>>>,
    sparse: HashMap<usize, SparseRows>,
}

impl Gradients {
    /// Dense gradient of a leaf. Every dense leaf that requires a gradient
    /// has one, zero-filled if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.dense.get(v.0).and_then(|g| g.as_deref())
    }

    /// Row-sparse gradient of a sparse leaf.
    pub fn sparse(&self, v: Var) -> Option<&SparseRows> {
        self.sparse.get(&v.0)
    }
}

/// The recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dense_operand(&self, op: &'static str, v: Var) -> Result<()> {
        match self.nodes[v.0].op {
            Op::Leaf(LeafKind::Sparse) => Err(Error::State(format!(
                "sparse leaf can only be read by embedding_gather, not {op}"
            ))),
            _ => Ok(()),
        }
    }

    /// A trainable input with a dense gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(LeafKind::Dense), true)
    }

    /// A trainable rank-2 embedding table whose gradient is row-sparse.
    pub fn sparse_leaf(&mut self, value: Tensor) -> Result<Var> {
        if value.rank() != 2 {
            return Err(Error::dim("sparse_leaf", value.shape(), &[0, 0]));
        }
        Ok(self.push(value, Op::Leaf(LeafKind::Sparse), true))
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dense_operand("matmul", a)?;
        self.dense_operand("matmul", b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            (n, 1),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched matrix product over a leading axis: `(n,m,k) x (n,k,p)`, or
    /// `(n,m,k) x (n,p,k)^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.dense_operand("batch_matmul", a)?;
        self.dense_operand("batch_matmul", b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; batch * m * p];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let b_strides = if trans_b { (1, k) } else { (p, 1) };
        for i in 0..batch {
            gemm(
                (m, k, p),
                &ad[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bd[i * k * p..(i + 1) * k * p],
                b_strides,
                &mut out[i * m * p..(i + 1) * m * p],
                (p, 1),
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new([batch, m, p], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.dense_operand(op, a)?;
        self.dense_operand(op, b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dense_operand("add_broadcast", a)?;
        self.dense_operand("add_broadcast", b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_broadcast", sa, sb));
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let out: Vec<f64> = if w == 0 {
            self.value(a).data().to_vec()
        } else {
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i % w])
                .collect()
        };
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBroadcast { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.dense_operand("scale", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * factor).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale { a, factor }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.dense_operand("gelu", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| gelu(x)).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gelu { a }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis of a `(.., l, l)` score tensor where row
    /// `i` only sees columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        self.dense_operand("softmax", a)?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if shape.is_empty() || (causal && (shape.len() < 2 || shape[shape.len() - 2] != shape[shape.len() - 1])) {
            return Err(Error::dim("softmax", &shape, &shape));
        }
        let w = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        if w > 0 {
            for (r, (src, dst)) in t.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
                let live = if causal { r % w + 1 } else { w };
                softmax_row(&src[..live], &mut dst[..live]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg))
    }

    /// `gain * (x - mean) / sqrt(var + eps) + bias` over the last axis,
    /// with the biased (divide-by-n) variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        for v in [x, gain, bias] {
            self.dense_operand("layer_norm", v)?;
        }
        let n = self.value(x).last_dim();
        let sx = self.shape(x);
        if sx.is_empty() || n == 0 {
            return Err(Error::dim("layer_norm", sx, &[n]));
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer_norm", sx, self.shape(gain)));
        }
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = xd.len() / n;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for i in 0..n {
                let h = (row[i] - mean) * inv;
                xhat[r * n + i] = h;
                out[r * n + i] = gd[i] * h + bd[i];
            }
        }
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a rank-2 table. The backward pass scatter-adds into
    /// the table's gradient, row-sparse when the table is a sparse leaf.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::dim("embedding_gather", st, &[ids.len()]));
        }
        let (rows, w) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index {
                id: bad,
                extent: rows,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            out.extend_from_slice(&td[id * w..(id + 1) * w]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new([ids.len(), w], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::dim("concat_last", &[], &[]));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.dense_operand("concat_last", p)?;
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(first), s));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.dense_operand("reshape", a)?;
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.dense_operand("permute", a)?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let (out, out_shape) = permute_data(self.value(a).data(), &shape, axes);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Mean token cross-entropy of `logits (n, vocab)` against `targets`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.dense_operand("cross_entropy", logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", s, &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(Error::Data("cross entropy over zero targets".into()));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index { id: bad, extent: v });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * v..(r + 1) * v];
            softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.dense_operand("sum", a)?;
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// Sum of squares of all entries, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut dense: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut sparse: HashMap<usize, SparseRows> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(LeafKind::Sparse) = node.op {
                sparse.insert(i, SparseRows::new(node.value.last_dim()));
            }
        }
        dense[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf(_) | Op::Constant) {
                continue;
            }
            let Some(g) = dense[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut dense, &mut sparse);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(LeafKind::Dense) = node.op {
                if dense[i].is_none() {
                    dense[i] = Some(vec![0.0; node.value.numel()]);
                }
            } else if !matches!(node.op, Op::Leaf(_)) {
                dense[i] = None;
            }
        }
        Ok(Gradients { dense, sparse })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        dense: &mut [Option<Vec<f64>>],
        sparse: &mut HashMap<usize, SparseRows>,
    ) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = acc(nodes, dense, *a) {
                    gemm((m, n, k), g, (n, 1), nodes[b.0].value.data(), (1, n), da, (k, 1), true);
                }
                if let Some(db) = acc(nodes, dense, *b) {
                    gemm((k, m, n), nodes[a.0].value.data(), (1, k), g, (n, 1), db, (n, 1), true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.value.shape()[2];
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = acc(nodes, dense, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let bi = &bd[i * k * p..(i + 1) * k * p];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        // dA = dC * B^T, or dC * B when B was already transposed.
                        let bs = if *trans_b { (k, 1) } else { (1, p) };
                        gemm((m, p, k), gi, (p, 1), bi, bs, dai, (k, 1), true);
                    }
                }
                if let Some(db) = acc(nodes, dense, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            // dB (p,k) = dC^T * A
                            gemm((p, m, k), gi, (1, p), ai, (k, 1), dbi, (k, 1), true);
                        } else {
                            // dB (k,p) = A^T * dC
                            gemm((k, m, p), ai, (1, k), gi, (p, 1), dbi, (p, 1), true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = acc(nodes, dense, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if let Some(da) = acc(nodes, dense, *a) {
                    add_into(da, g);
                }
                if let Some(db) = acc(nodes, dense, *b) {
                    let w = db.len();
                    if w > 0 {
                        for chunk in g.chunks(w) {
                            add_into(db, chunk);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = acc(nodes, dense, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if let Some(db) = acc(nodes, dense, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = acc(nodes, dense, *a) {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::Gelu { a } => {
                let ad = nodes[a.0].value.data();
                if let Some(da) = acc(nodes, dense, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(ad[i]);
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                if let Some(da) = acc(nodes, dense, *a) {
                    if w > 0 {
                        for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(da.chunks_mut(w)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for i in 0..w {
                                dr[i] += yr[i] * (gr[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gd = nodes[gain.0].value.data();
                if let Some(dgain) = acc(nodes, dense, *gain) {
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for i in 0..n {
                            dgain[i] += gr[i] * hr[i];
                        }
                    }
                }
                if let Some(dbias) = acc(nodes, dense, *bias) {
                    for gr in g.chunks(n) {
                        add_into(dbias, gr);
                    }
                }
                if let Some(dx) = acc(nodes, dense, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, ((hr, gr), dxr)) in
                        xhat.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).enumerate()
                    {
                        for i in 0..n {
                            dh[i] = gr[i] * gd[i];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        for i in 0..n {
                            dxr[i] += inv_std[r] * (dh[i] - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let w = node.value.last_dim();
                if let Some(rows) = sparse.get_mut(&table.0) {
                    for (i, &id) in ids.iter().enumerate() {
                        rows.accumulate(id, &g[i * w..(i + 1) * w]);
                    }
                } else if let Some(dt) = acc(nodes, dense, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * w..(id + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if let Some(dp) = acc(nodes, dense, p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = acc(nodes, dense, *a) {
                    add_into(da, g);
                }
            }
            Op::Permute { a, axes } => {
                if let Some(da) = acc(nodes, dense, *a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inverse);
                    add_into(da, &back);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.last_dim();
                let scale = g[0] / targets.len() as f64;
                if let Some(dl) = acc(nodes, dense, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dl[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = acc(nodes, dense, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], dense: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(dense[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Natural-log softmax of each last-axis row.
pub fn log_softmax_rows(t: &Tensor) -> Vec<f64> {
    let w = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    if w == 0 {
        return out;
    }
    for row in t.data().chunks(w) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// `C (m,n) = A (m,k) * B (k,n)` (or `C +=` when `accumulate`), with
/// arbitrary row/column strides for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
