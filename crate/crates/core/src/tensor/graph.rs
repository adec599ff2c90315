//! Tape-based reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] owns an append-only arena of nodes. Forward ops evaluate
//! eagerly and record their inputs; [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients additively. Inputs always precede
//! outputs on the tape, so one reverse sweep suffices.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Index of a node in its [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Matmul(NodeId, NodeId),
    /// `a · bᵀ`; avoids materializing transposes in attention scores.
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[m×n] + [1×n]` row broadcast (bias addition).
    AddRow(NodeId, NodeId),
    /// Elementwise sum of same-shape nodes (batch loss aggregation).
    AddN(Vec<NodeId>),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise division by a scalar-shaped node (temperature).
    DivByScalar(NodeId, NodeId),
    Exp(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    /// Row gather from an embedding table.
    Embed { table: NodeId, ids: Vec<usize> },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows(NodeId),
    SumAll(NodeId),
    /// Σᵢ −log softmax(logits)ᵢ[targetᵢ]; the sum (not mean) over rows.
    CrossEntropySum { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Gradient contribution flowing to one input of an op.
enum Delta {
    Dense(Vec<f64>),
    /// Sparse row updates (embedding tables).
    Rows(Vec<(usize, Vec<f64>)>),
}

/// Autodiff tape. See module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, requires_grad: bool) -> NodeId {
        tensor.requires_grad = requires_grad;
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.requires(id))
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Value of a scalar (single-element) node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id.0].tensor;
        (t.rows(), t.cols())
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> NodeId {
        self.push(tensor, Op::Leaf { param: None }, requires_grad)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor, false)
    }

    /// Leaf bound to a parameter slot; `accumulate_param_grads` routes its
    /// gradient back into the [`ParamSet`].
    pub fn param(&mut self, params: &ParamSet, index: usize) -> NodeId {
        let p = params.get(index);
        let tensor = Tensor {
            shape: p.tensor.shape.clone(),
            data: p.tensor.data.clone(),
            grad: None,
            requires_grad: true,
        };
        self.push(tensor, Op::Leaf { param: Some(index) }, true)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Standard matrix product `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::Matmul(a, b),
            req,
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::MatmulNt(a, b),
            req,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        let da = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(vec![n, m], out).expect("sized above"),
            Op::Transpose(a),
            req,
        ))
    }

    // ── elementwise and broadcast ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Add(a, b),
            req,
        ))
    }

    /// Broadcast a `[1×n]` row over every row of `[m×n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        let (rm, rn) = self.rows_cols(row);
        if rm != 1 || rn != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let da = self.data(a);
        let dr = self.data(row);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = da[i * n + j] + dr[j];
            }
        }
        let req = self.any_requires(&[a, row]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::AddRow(a, row),
            req,
        ))
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = *ids
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n of zero nodes".into()))?;
        let shape = self.shape(first).to_vec();
        for &id in &ids[1..] {
            if self.shape(id) != shape {
                return Err(self.shape_err("add_n", first, id));
            }
        }
        let mut out = vec![0.0; shape.iter().product()];
        for &id in ids {
            for (o, v) in out.iter_mut().zip(self.data(id)) {
                *o += v;
            }
        }
        let req = self.any_requires(ids);
        Ok(self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::AddN(ids.to_vec()),
            req,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Mul(a, b),
            req,
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale(a, c),
            req,
        )
    }

    /// Divide every element of `a` by the scalar node `s`.
    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].tensor.numel() != 1 {
            return Err(self.shape_err("div_by_scalar", a, s));
        }
        let sv = self.data(s)[0];
        if sv == 0.0 {
            return Err(Error::NonFinite("division by zero scalar".into()));
        }
        let out: Vec<f64> = self.data(a).iter().map(|x| x / sv).collect();
        let shape = self.shape(a).to_vec();
        let req = self.any_requires(&[a, s]);
        Ok(self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::DivByScalar(a, s),
            req,
        ))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Exp(a),
            req,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Gelu(a),
            req,
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Tanh(a),
            req,
        )
    }

    // ── structure ───────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = *ids
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero nodes".into()))?;
        let n = self.rows_cols(first).1;
        let mut total_rows = 0;
        for &id in ids {
            let (m_i, n_i) = self.rows_cols(id);
            if n_i != n {
                return Err(self.shape_err("concat_rows", first, id));
            }
            total_rows += m_i;
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for &id in ids {
            out.extend_from_slice(self.data(id));
        }
        let req = self.any_requires(ids);
        Ok(self.push(
            Tensor::new(vec![total_rows, n], out).expect("sized above"),
            Op::ConcatRows(ids.to_vec()),
            req,
        ))
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = *ids
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of zero nodes".into()))?;
        let m = self.rows_cols(first).0;
        let mut total_cols = 0;
        for &id in ids {
            let (m_i, n_i) = self.rows_cols(id);
            if m_i != m {
                return Err(self.shape_err("concat_cols", first, id));
            }
            total_cols += n_i;
        }
        let mut out = vec![0.0; m * total_cols];
        let mut col_off = 0;
        for &id in ids {
            let n_i = self.rows_cols(id).1;
            let d = self.data(id);
            for i in 0..m {
                out[i * total_cols + col_off..i * total_cols + col_off + n_i]
                    .copy_from_slice(&d[i * n_i..(i + 1) * n_i]);
            }
            col_off += n_i;
        }
        let req = self.any_requires(ids);
        Ok(self.push(
            Tensor::new(vec![m, total_cols], out).expect("sized above"),
            Op::ConcatCols(ids.to_vec()),
            req,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        if start + len > m || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(vec![len, n], out).expect("sized above"),
            Op::SliceRows(a, start),
            req,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        if start + len > n || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let d = self.data(a);
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(vec![m, len], out).expect("sized above"),
            Op::SliceCols(a, start),
            req,
        ))
    }

    /// Gather rows of an embedding table by token id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, c) = self.rows_cols(table);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embed of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IndexOutOfRange {
                what: "embed",
                index: bad,
                size: v,
            });
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            out.extend_from_slice(&d[id * c..(id + 1) * c]);
        }
        let req = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out).expect("sized above"),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    // ── reductions and nonlinear rows ───────────────────────────────────

    /// Numerically stabilized row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(a);
        let d = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let req = self.requires(a);
        self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::SoftmaxRows(a),
            req,
        )
    }

    /// Per-row standardization followed by an affine map:
    /// `γ ⊙ (x−μ)/√(σ²+eps) + β` with `γ, β: [1×n]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (m, n) = self.rows_cols(x);
        for &p in &[gamma, beta] {
            let (pm, pn) = self.rows_cols(p);
            if pm != 1 || pn != n {
                return Err(self.shape_err("layer_norm", x, p));
            }
        }
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
            }
        }
        let req = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::LayerNorm { x, gamma, beta, eps },
            req,
        ))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(a);
        let d = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let req = self.requires(a);
        self.push(
            Tensor::new(vec![1, n], out).expect("sized above"),
            Op::MeanRows(a),
            req,
        )
    }

    /// Scale every row to unit Euclidean norm.
    ///
    /// Errors on rows with norm below `1e-12`: normalizing a
    /// near-zero vector has no meaningful direction.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        let d = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            if norm < 1e-12 {
                return Err(Error::NonFinite(format!(
                    "l2_normalize_rows: row {i} has near-zero norm"
                )));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("sized above"),
            Op::L2NormalizeRows(a),
            req,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), req)
    }

    /// Σᵢ −log softmax(logits)ᵢ[targetᵢ] — the sum over all rows, not the
    /// mean, so sequence losses add per-position terms directly.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.rows_cols(logits);
        if targets.len() != m {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy_sum: {m} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy_sum target",
                index: bad,
                size: n,
            });
        }
        let d = self.data(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * n..(i + 1) * n];
            loss += log_sum_exp(row) - row[t];
        }
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            req,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node, accumulating gradients into
    /// every node that requires them. Gradients add; call sites zero
    /// parameter gradients explicitly between optimizer steps.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tensor.data[0].is_finite() {
            return Err(Error::NonFinite("loss value before backward".into()));
        }
        self.nodes[loss.0].tensor.ensure_grad()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad || self.nodes[i].tensor.grad.is_none() {
                continue;
            }
            let deltas = self.input_deltas(i);
            for (input, delta) in deltas {
                let t = &mut self.nodes[input.0].tensor;
                if !t.requires_grad {
                    continue;
                }
                let grad = t.ensure_grad();
                match delta {
                    Delta::Dense(d) => {
                        debug_assert_eq!(d.len(), grad.len());
                        for (g, v) in grad.iter_mut().zip(&d) {
                            *g += v;
                        }
                    }
                    Delta::Rows(rows) => {
                        let c = rows.first().map_or(0, |(_, r)| r.len());
                        for (row, vals) in rows {
                            for (g, v) in grad[row * c..(row + 1) * c].iter_mut().zip(&vals) {
                                *g += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn input_deltas(&self, i: usize) -> Vec<(NodeId, Delta)> {
        let node = &self.nodes[i];
        let g = node.tensor.grad.as_ref().expect("checked by caller");
        let out = &node.tensor.data;
        match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::Matmul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                // da = g·bᵀ ; db = aᵀ·g
                let da_ = matmul_nt_vec(g, self.data(*b), m, n, k);
                let db_ = matmul_tn_vec(self.data(*a), g, m, k, n);
                vec![(*a, Delta::Dense(da_)), (*b, Delta::Dense(db_))]
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).0;
                // out = a·bᵀ: da = g·b ; db = gᵀ·a
                let mut da_ = vec![0.0; m * k];
                matmul_into(g, self.data(*b), m, n, k, &mut da_);
                let db_ = matmul_tn_vec(g, self.data(*a), m, n, k);
                vec![(*a, Delta::Dense(da_)), (*b, Delta::Dense(db_))]
            }
            Op::Add(a, b) => vec![
                (*a, Delta::Dense(g.clone())),
                (*b, Delta::Dense(g.clone())),
            ],
            Op::AddRow(a, row) => {
                let (m, n) = self.rows_cols(*a);
                let mut drow = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        drow[j] += g[i * n + j];
                    }
                }
                vec![(*a, Delta::Dense(g.clone())), (*row, Delta::Dense(drow))]
            }
            Op::AddN(ids) => ids
                .iter()
                .map(|&id| (id, Delta::Dense(g.clone())))
                .collect(),
            Op::Mul(a, b) => {
                let da_: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, b)| g * b).collect();
                let db_: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, a)| g * a).collect();
                vec![(*a, Delta::Dense(da_)), (*b, Delta::Dense(db_))]
            }
            Op::Scale(a, c) => {
                vec![(*a, Delta::Dense(g.iter().map(|g| g * c).collect()))]
            }
            Op::DivByScalar(a, s) => {
                let sv = self.data(*s)[0];
                let da_: Vec<f64> = g.iter().map(|g| g / sv).collect();
                let ds_: f64 = -g.iter().zip(out).map(|(g, o)| g * o).sum::<f64>() / sv;
                vec![(*a, Delta::Dense(da_)), (*s, Delta::Dense(vec![ds_]))]
            }
            Op::Exp(a) => {
                vec![(*a, Delta::Dense(g.iter().zip(out).map(|(g, o)| g * o).collect()))]
            }
            Op::Gelu(a) => {
                let da_: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * gelu_derivative(x))
                    .collect();
                vec![(*a, Delta::Dense(da_))]
            }
            Op::Tanh(a) => {
                let da_: Vec<f64> = g.iter().zip(out).map(|(g, o)| g * (1.0 - o * o)).collect();
                vec![(*a, Delta::Dense(da_))]
            }
            Op::ConcatRows(ids) => {
                let n = self.rows_cols(ids[0]).1;
                let mut offset = 0;
                ids.iter()
                    .map(|&id| {
                        let m_i = self.rows_cols(id).0;
                        let d = g[offset * n..(offset + m_i) * n].to_vec();
                        offset += m_i;
                        (id, Delta::Dense(d))
                    })
                    .collect()
            }
            Op::ConcatCols(ids) => {
                let m = self.rows_cols(ids[0]).0;
                let total: usize = ids.iter().map(|&id| self.rows_cols(id).1).sum();
                let mut offset = 0;
                ids.iter()
                    .map(|&id| {
                        let n_i = self.rows_cols(id).1;
                        let mut d = vec![0.0; m * n_i];
                        for i in 0..m {
                            d[i * n_i..(i + 1) * n_i].copy_from_slice(
                                &g[i * total + offset..i * total + offset + n_i],
                            );
                        }
                        offset += n_i;
                        (id, Delta::Dense(d))
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.rows_cols(*a);
                let len = node.tensor.rows();
                let mut da_ = vec![0.0; m * n];
                da_[start * n..(start + len) * n].copy_from_slice(g);
                vec![(*a, Delta::Dense(da_))]
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.rows_cols(*a);
                let len = node.tensor.cols();
                let mut da_ = vec![0.0; m * n];
                for i in 0..m {
                    da_[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*a, Delta::Dense(da_))]
            }
            Op::Embed { table, ids } => {
                let c = self.rows_cols(*table).1;
                let rows = ids
                    .iter()
                    .enumerate()
                    .map(|(l, &id)| (id, g[l * c..(l + 1) * c].to_vec()))
                    .collect();
                vec![(*table, Delta::Rows(rows))]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.rows_cols(*a);
                let mut da_ = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let inner = dot(gr, y);
                    for j in 0..n {
                        da_[i * n + j] = y[j] * (gr[j] - inner);
                    }
                }
                vec![(*a, Delta::Dense(da_))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = self.rows_cols(*x);
                let dx_data = self.data(*x);
                let gamma_data = self.data(*gamma);
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &dx_data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let (mean, var) = mean_var(row);
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(&gamma_data[..n])
                        .map(|(g, gm)| g * gm)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dot(&dxhat, &xhat);
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx[i * n + j] = inv_std / n as f64
                            * (n as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                vec![
                    (*x, Delta::Dense(dx)),
                    (*gamma, Delta::Dense(dgamma)),
                    (*beta, Delta::Dense(dbeta)),
                ]
            }
            Op::Transpose(a) => {
                let (m, n) = self.rows_cols(*a);
                let mut da_ = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da_[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, Delta::Dense(da_))]
            }
            Op::MeanRows(a) => {
                let (m, n) = self.rows_cols(*a);
                let mut da_ = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da_[i * n + j] = g[j] / m as f64;
                    }
                }
                vec![(*a, Delta::Dense(da_))]
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = self.rows_cols(*a);
                let x = self.data(*a);
                let mut da_ = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let yr = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let norm = dot(xr, xr).sqrt();
                    let gy = dot(gr, yr);
                    for j in 0..n {
                        da_[i * n + j] = (gr[j] - yr[j] * gy) / norm;
                    }
                }
                vec![(*a, Delta::Dense(da_))]
            }
            Op::SumAll(a) => {
                let da_ = vec![g[0]; self.nodes[a.0].tensor.numel()];
                vec![(*a, Delta::Dense(da_))]
            }
            Op::CrossEntropySum { logits, targets } => {
                let (m, n) = self.rows_cols(*logits);
                let d = self.data(*logits);
                let mut da_ = vec![0.0; m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &d[i * n..(i + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / sum;
                        da_[i * n + j] = g[0] * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                vec![(*logits, Delta::Dense(da_))]
            }
        }
    }

    /// Add leaf gradients into their bound parameters after `backward`.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = node.op {
                if let Some(g) = &node.tensor.grad {
                    let target = params.get_mut(idx).tensor.ensure_grad();
                    for (t, v) in target.iter_mut().zip(g) {
                        *t += v;
                    }
                }
            }
        }
    }
}

// ── scalar helpers ──────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Tanh approximation of the Gaussian error linear unit.
fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `out += a·b` for row-major `a: [m×k]`, `b: [k×n]`.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a·bᵀ` for `a: [m×n]`, `b: [k×n]` → `[m×k]`.
fn matmul_nt_vec(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `aᵀ·b` for `a: [m×k]`, `b: [m×n]` → `[k×n]`.
fn matmul_tn_vec(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(vec![2, 2], vec![2.0, 0.0, 1.0, 2.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 4.0, 10.0, 8.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = rng_from(7);
        let mut g = Graph::new();
        let a_data: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let b_data: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let a = g.constant(t(vec![2, 3], a_data));
        let b = g.constant(t(vec![4, 3], b_data));
        let direct = g.matmul_nt(a, b).unwrap();
        let bt = g.transpose(b).unwrap();
        let via_t = g.matmul(a, bt).unwrap();
        assert_eq!(g.data(direct), g.data(via_t));
    }

    #[test]
    fn softmax_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![0.0, 3.0f64.ln()]));
        let y = g.softmax_rows(x);
        let d = g.data(y);
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_inputs() {
        let mut rng = rng_from(11);
        for _ in 0..100 {
            let n = rng.random_range(1..6usize);
            let data: Vec<f64> = (0..2 * n)
                .map(|_| rng.random_range(-1e4..1e4f64))
                .collect();
            let mut g = Graph::new();
            let x = g.constant(t(vec![2, n], data));
            let y = g.softmax_rows(x);
            for row in g.data(y).chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![1.0, 3.0]));
        let gamma = g.constant(t(vec![1, 2], vec![1.0, 1.0]));
        let beta = g.constant(t(vec![1, 2], vec![0.0, 0.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let d = g.data(y);
        assert!((d[0] + 1.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = rng_from(13);
        for _ in 0..50 {
            let n = rng.random_range(2..9usize);
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(t(vec![1, n], data));
            let gamma = g.constant(Tensor::full(vec![1, n], 1.0));
            let beta = g.constant(Tensor::zeros(vec![1, n]));
            let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
            let (mean, var) = mean_var(g.data(y));
            assert!(mean.abs() < 1e-9);
            // Constant rows have zero variance; eps then dominates.
            if var > 1e-6 {
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 8]));
        let loss = g.cross_entropy_sum(logits, &[3]).unwrap();
        assert!((g.value(loss) - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_example() {
        let mut g = Graph::new();
        let logits = g.constant(t(vec![1, 2], vec![0.0, 3.0f64.ln()]));
        let loss = g.cross_entropy_sum(logits, &[1]).unwrap();
        // −ln 0.75
        assert!((g.value(loss) - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_shift_invariant() {
        let mut rng = rng_from(17);
        for _ in 0..100 {
            let n = rng.random_range(2..7usize);
            let m = rng.random_range(1..4usize);
            let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|x| x + 123.0).collect();
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let mut g = Graph::new();
            let a = g.constant(t(vec![m, n], data));
            let b = g.constant(t(vec![m, n], shifted));
            let la = g.cross_entropy_sum(a, &targets).unwrap();
            let lb = g.cross_entropy_sum(b, &targets).unwrap();
            assert!(g.value(la) >= 0.0);
            assert!((g.value(la) - g.value(lb)).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_handles_extreme_logits() {
        let mut g = Graph::new();
        let logits = g.constant(t(vec![1, 3], vec![1e4, 0.0, -1e4]));
        let loss = g.cross_entropy_sum(logits, &[0]).unwrap();
        assert!(g.value(loss).is_finite());
        assert!(g.value(loss) < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(vec![1, 2], vec![5.0, 6.0]));
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2]);
        let back = g.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(g.data(back), &[5.0, 6.0]);

        let cc = g.concat_cols(&[a, a]).unwrap();
        assert_eq!(g.shape(cc), &[2, 4]);
        assert_eq!(g.data(cc), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let col = g.slice_cols(cc, 1, 2).unwrap();
        assert_eq!(g.data(col), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn embed_gathers_rows_and_rejects_bad_ids() {
        let mut g = Graph::new();
        let table = g.constant(t(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let e = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(g.embed(table, &[3]).is_err());
    }

    #[test]
    fn l2_normalize_makes_unit_rows_and_rejects_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 2], vec![3.0, 4.0, 0.5, 0.0]));
        let y = g.l2_normalize_rows(x).unwrap();
        let d = g.data(y);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        assert!((dot(&d[2..4], &d[2..4]) - 1.0).abs() < 1e-12);
        let z = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(g.l2_normalize_rows(z).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 2], vec![1.0, 2.0]), true);
        let b = g.constant(t(vec![1, 2], vec![3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // loss = sum(x + x) ⇒ dx = 2 everywhere.
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 3], vec![1.0, 2.0, 3.0]), true);
        let s = g.add(x, x).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    // ── numeric gradient checks, op by op ───────────────────────────────

    /// Max relative error between analytic and central-difference gradients
    /// of a scalar-valued graph builder over the given leaf inputs.
    fn op_grad_error_h(
        inputs: &[Tensor],
        h: f64,
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) -> f64 {
        let forward = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let loss = build(&mut g, &ids);
            g.value(loss)
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();

        let mut worst = 0.0f64;
        for (ti, input) in inputs.iter().enumerate() {
            let analytic = g
                .grad(ids[ti])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            for ei in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data[ei] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data[ei] -= h;
                let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
                let a = analytic[ei];
                let err = (a - numeric).abs() / f64::max(a.abs().max(numeric.abs()), 1e-8);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn op_grad_error(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) -> f64 {
        op_grad_error_h(inputs, 1e-5, build)
    }

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        t(shape, data)
    }

    /// Random weights used to reduce a non-scalar op output to a scalar so
    /// that every output element's gradient path is exercised.
    fn reduce_weights(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        t(shape.to_vec(), data)
    }

    #[test]
    fn per_op_gradients_match_central_differences() {
        let mut rng = rng_from(42);
        for round in 0..100u64 {
            let m = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let n = rng.random_range(1..4usize);
            // Central differences at h=1e-5 carry truncation noise up to
            // ~1e-6 for curvy ops; a wrong backward formula errs near 1.
            let tol = 1e-5;

            let check = |label: &str, err: f64| {
                assert!(err < tol, "round {round}: {label} gradient error {err}");
            };

            let w_mn = reduce_weights(&mut rng, &[m, n]);
            let a_mk = rand_tensor(&mut rng, vec![m, k]);
            let b_kn = rand_tensor(&mut rng, vec![k, n]);
            let w = w_mn.clone();
            check(
                "matmul",
                op_grad_error(&[a_mk.clone(), b_kn.clone()], move |g, ids| {
                    let c = g.matmul(ids[0], ids[1]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(c, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let b_nk = rand_tensor(&mut rng, vec![n, k]);
            let w = w_mn.clone();
            check(
                "matmul_nt",
                op_grad_error(&[a_mk.clone(), b_nk], move |g, ids| {
                    let c = g.matmul_nt(ids[0], ids[1]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(c, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let x_mn = rand_tensor(&mut rng, vec![m, n]);
            let y_mn = rand_tensor(&mut rng, vec![m, n]);
            let row = rand_tensor(&mut rng, vec![1, n]);
            let w = w_mn.clone();
            check(
                "add+mul+scale",
                op_grad_error(&[x_mn.clone(), y_mn.clone()], move |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let p = g.mul(s, ids[0]).unwrap();
                    let sc = g.scale(p, 1.7);
                    let wn = g.constant(w.clone());
                    let q = g.mul(sc, wn).unwrap();
                    g.sum_all(q)
                }),
            );

            let w = w_mn.clone();
            check(
                "add_row",
                op_grad_error(&[x_mn.clone(), row], move |g, ids| {
                    let s = g.add_row(ids[0], ids[1]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let w = w_mn.clone();
            check(
                "add_n",
                op_grad_error(&[x_mn.clone(), y_mn.clone()], move |g, ids| {
                    let s = g.add_n(&[ids[0], ids[1], ids[0]]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            // Keep scalar away from zero for div_by_scalar.
            let scalar = t(vec![1], vec![rng.random_range(0.5..2.0)]);
            let w = w_mn.clone();
            check(
                "div_by_scalar",
                op_grad_error(&[x_mn.clone(), scalar], move |g, ids| {
                    let d = g.div_by_scalar(ids[0], ids[1]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(d, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let w = w_mn.clone();
            check(
                "exp+tanh+gelu",
                op_grad_error(&[x_mn.clone()], move |g, ids| {
                    let e = g.exp(ids[0]);
                    let sc = g.scale(e, 0.3);
                    let th = g.tanh(sc);
                    let ge = g.gelu(th);
                    let wn = g.constant(w.clone());
                    let p = g.mul(ge, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let extra = rand_tensor(&mut rng, vec![m + 1, n]);
            let w2 = reduce_weights(&mut rng, &[3 * m + 1, n]);
            check(
                "concat_rows+slice_rows",
                op_grad_error(&[x_mn.clone(), extra, y_mn.clone()], move |g, ids| {
                    let c = g.concat_rows(&[ids[0], ids[1], ids[2]]).unwrap();
                    let wn = g.constant(w2.clone());
                    let p = g.mul(c, wn).unwrap();
                    let s = g.slice_rows(p, 0, 3 * m + 1).unwrap();
                    g.sum_all(s)
                }),
            );

            let x_mk2 = rand_tensor(&mut rng, vec![m, k]);
            let w3 = reduce_weights(&mut rng, &[m, n + k]);
            check(
                "concat_cols+slice_cols+transpose",
                op_grad_error(&[x_mn.clone(), x_mk2], move |g, ids| {
                    let c = g.concat_cols(&[ids[0], ids[1]]).unwrap();
                    let tt = g.transpose(c).unwrap();
                    let back = g.transpose(tt).unwrap();
                    let wn = g.constant(w3.clone());
                    let p = g.mul(back, wn).unwrap();
                    let s = g.slice_cols(p, 0, n + k).unwrap();
                    g.sum_all(s)
                }),
            );

            let table = rand_tensor(&mut rng, vec![4, n]);
            let ids_list: Vec<usize> = (0..3).map(|_| rng.random_range(0..4usize)).collect();
            let w4 = reduce_weights(&mut rng, &[3, n]);
            check(
                "embed",
                op_grad_error(&[table], move |g, nodes| {
                    let e = g.embed(nodes[0], &ids_list).unwrap();
                    let wn = g.constant(w4.clone());
                    let p = g.mul(e, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let w = w_mn.clone();
            check(
                "softmax_rows",
                op_grad_error(&[x_mn.clone()], move |g, ids| {
                    let s = g.softmax_rows(ids[0]);
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            // Layer norm over n ≥ 2 features so variance is meaningful.
            // Its backward has large curvature when row variance is small,
            // so central differences need a bigger step and a looser bound;
            // an actually wrong formula still shows errors near 1.
            let x_ln = rand_tensor(&mut rng, vec![m, n + 1]);
            let gamma = rand_tensor(&mut rng, vec![1, n + 1]);
            let beta = rand_tensor(&mut rng, vec![1, n + 1]);
            let w5 = reduce_weights(&mut rng, &[m, n + 1]);
            let ln_err = op_grad_error_h(&[x_ln, gamma, beta], 1e-4, move |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let wn = g.constant(w5.clone());
                let p = g.mul(y, wn).unwrap();
                g.sum_all(p)
            });
            assert!(ln_err < 1e-4, "round {round}: layer_norm gradient error {ln_err}");

            let w6 = reduce_weights(&mut rng, &[1, n]);
            check(
                "mean_rows",
                op_grad_error(&[x_mn.clone()], move |g, ids| {
                    let mr = g.mean_rows(ids[0]);
                    let wn = g.constant(w6.clone());
                    let p = g.mul(mr, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            // Keep rows clearly away from the zero-norm guard.
            let mut x_l2 = rand_tensor(&mut rng, vec![m, n]);
            for r in 0..m {
                x_l2.data[r * n] += 3.0;
            }
            let w = w_mn.clone();
            check(
                "l2_normalize_rows",
                op_grad_error(&[x_l2], move |g, ids| {
                    let y = g.l2_normalize_rows(ids[0]).unwrap();
                    let wn = g.constant(w.clone());
                    let p = g.mul(y, wn).unwrap();
                    g.sum_all(p)
                }),
            );

            let logits = rand_tensor(&mut rng, vec![m, n + 1]);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n + 1)).collect();
            check(
                "cross_entropy_sum",
                op_grad_error(&[logits], move |g, ids| {
                    g.cross_entropy_sum(ids[0], &targets).unwrap()
                }),
            );
        }
    }
}
