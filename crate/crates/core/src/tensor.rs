//! Reverse-mode autodiff on a flat tape.
//!
//! Every tensor is a dense row-major matrix of f64 (scalars are 1x1). Ops
//! append nodes to a [`Tape`] in evaluation order, which is already a
//! topological order, so the backward pass is a single reverse sweep with
//! gradient accumulation at fan-out points. All reductions run in a fixed
//! index order, so replaying a tape from identical inputs is bit-identical.

use crate::error::{Error, Result};

// ── plain matrix storage ────────────────────────────────────────────────────

/// Dense row-major matrix used for parameters and host-side data.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat size mismatch");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

// ── tape ────────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddRowVec(TensorId, TensorId),
    ScaleRows(TensorId, TensorId),
    RowSums(TensorId),
    Recip(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SqNorm(TensorId),
    SoftmaxRows(TensorId),
    Silu(TensorId),
    RmsNormRows(TensorId, f64),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    GatherRows(TensorId, Vec<usize>),
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation graph. One tape per training step is the intended
/// lifecycle: register leaves, build the loss, call [`Tape::backward`], read
/// gradients, drop the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { data, rows, cols, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn to_mat(&self, id: TensorId) -> Mat {
        let n = self.node(id);
        Mat::new(n.rows, n.cols, n.data.clone())
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.data.len(), 1, "scalar() on non-scalar tensor");
        n.data[0]
    }

    /// Gradient accumulated on `id` by previous backward calls, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────────

    pub fn leaf(&mut self, m: &Mat, requires_grad: bool) -> TensorId {
        self.push(m.data.clone(), m.rows, m.cols, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, m: &Mat) -> TensorId {
        self.leaf(m, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], 1, 1, false, Op::Leaf)
    }

    /// Copies the value of `a` onto a fresh gradient-stopping leaf.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let n = self.node(a);
        let (data, rows, cols) = (n.data.clone(), n.rows, n.cols);
        self.push(data, rows, cols, false, Op::Leaf)
    }

    // ── primitives ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                for p in 0..k {
                    let a_ip = ad[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += a_ip * brow[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, m, n, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.node(a).data;
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = ad[i * n + j];
                }
            }
        }
        let rg = self.requires(a);
        self.push(out, n, m, rg, Op::Transpose(a))
    }

    fn ew2(&mut self, op_name: &'static str, a: TensorId, b: TensorId) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        let (m2, n2) = self.dims(b);
        if (m, n) != (m2, n2) {
            return Err(Error::Dimension { op: op_name, lhs: (m, n), rhs: (m2, n2) });
        }
        Ok((m, n))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.ew2("add", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, m, n, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.ew2("sub", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, m, n, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.ew2("mul", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, m, n, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.node(a).data.iter().map(|x| c * x).collect();
        let rg = self.requires(a);
        self.push(out, m, n, rg, Op::Scale(a, c))
    }

    /// Adds a 1xN row vector to every row of an MxN matrix.
    pub fn add_rowvec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != n {
            return Err(Error::Dimension { op: "add_rowvec", lhs: (m, n), rhs: (vr, vc) });
        }
        let mut out = self.node(a).data.clone();
        {
            let vd = &self.node(v).data;
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += vd[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(out, m, n, rg, Op::AddRowVec(a, v)))
    }

    /// Scales row i of an MxN matrix by the i-th entry of an Mx1 column.
    pub fn scale_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != m || vc != 1 {
            return Err(Error::Dimension { op: "scale_rows", lhs: (m, n), rhs: (vr, vc) });
        }
        let mut out = self.node(a).data.clone();
        {
            let vd = &self.node(v).data;
            for i in 0..m {
                let s = vd[i];
                for j in 0..n {
                    out[i * n + j] *= s;
                }
            }
        }
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(out, m, n, rg, Op::ScaleRows(a, v)))
    }

    /// Row sums of an MxN matrix as an Mx1 column.
    pub fn row_sums(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                out[i] += ad[i * n + j];
            }
        }
        let rg = self.requires(a);
        self.push(out, m, 1, rg, Op::RowSums(a))
    }

    /// Elementwise reciprocal. Errors on exact zeros.
    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        if self.node(a).data.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return Err(Error::Numeric { op: "recip" });
        }
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.node(a).data.iter().map(|x| 1.0 / x).collect();
        let rg = self.requires(a);
        Ok(self.push(out, m, n, rg, Op::Recip(a)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.node(a).data.iter().sum();
        let rg = self.requires(a);
        self.push(vec![s], 1, 1, rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let d = &self.node(a).data;
        let s: f64 = d.iter().sum();
        let mean = s / d.len() as f64;
        let rg = self.requires(a);
        self.push(vec![mean], 1, 1, rg, Op::MeanAll(a))
    }

    /// Squared L2 norm over all entries.
    pub fn sq_norm(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.node(a).data.iter().map(|x| x * x).sum();
        let rg = self.requires(a);
        self.push(vec![s], 1, 1, rg, Op::SqNorm(a))
    }

    /// Row-wise softmax with max subtraction. Errors on non-finite input.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if self.node(a).data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { op: "softmax_rows" });
        }
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, m, n, rg, Op::SoftmaxRows(a)))
    }

    /// SiLU nonlinearity x * sigmoid(x).
    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let rg = self.requires(a);
        self.push(out, m, n, rg, Op::Silu(a))
    }

    /// Row-wise RMS normalization: each row divided by sqrt(mean(x^2) + eps).
    pub fn rmsnorm_rows(&mut self, a: TensorId, eps: f64) -> TensorId {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let ms: f64 = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = (ms + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = row[j] / r;
            }
        }
        let rg = self.requires(a);
        self.push(out, m, n, rg, Op::RmsNormRows(a, eps))
    }

    /// Rows r0..r1 (exclusive end).
    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if r0 > r1 || r1 > m {
            return Err(Error::contract(format!("slice_rows {r0}..{r1} out of bounds for {m} rows")));
        }
        let out = self.node(a).data[r0 * n..r1 * n].to_vec();
        let rg = self.requires(a);
        Ok(self.push(out, r1 - r0, n, rg, Op::SliceRows(a, r0)))
    }

    /// Columns c0..c1 (exclusive end).
    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if c0 > c1 || c1 > n {
            return Err(Error::contract(format!("slice_cols {c0}..{c1} out of bounds for {n} cols")));
        }
        let w = c1 - c0;
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&ad[i * n + c0..i * n + c1]);
        }
        let rg = self.requires(a);
        Ok(self.push(out, m, w, rg, Op::SliceCols(a, c0)))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty part list"));
        }
        let (_, n) = self.dims(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::Dimension { op: "concat_rows", lhs: (rows, n), rhs: (pm, pn) });
            }
            out.extend_from_slice(&self.node(p).data);
            rows += pm;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, rows, n, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list"));
        }
        let (m, _) = self.dims(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::Dimension { op: "concat_cols", lhs: (m, total), rhs: (pm, pn) });
            }
            widths.push(pn);
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let pn = widths[idx];
            let pd = &self.node(p).data;
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(&pd[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, m, total, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Row lookup: output row k is `table` row `idx[k]`. Duplicate indices
    /// accumulate gradient on the shared row.
    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::domain(format!("gather_rows: index {bad} >= {m} rows")));
        }
        let td = &self.node(table).data;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        let rg = self.requires(table);
        Ok(self.push(out, idx.len(), n, rg, Op::GatherRows(table, idx.to_vec())))
    }

    /// Mean squared error over all entries of two same-shaped tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.ew2("mse", a, b)?;
        let d = self.sub(a, b)?;
        let s = self.sq_norm(d);
        Ok(self.scale(s, 1.0 / (m * n) as f64))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate on top of any
    /// previous backward call; use [`Tape::reset_grads`] between passes that
    /// must not mix.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        {
            let n = self.node(root);
            if n.data.len() != 1 {
                return Err(Error::contract(format!(
                    "backward root must be scalar, got {}x{}",
                    n.rows, n.cols
                )));
            }
        }
        if !self.requires(root) {
            return Ok(());
        }
        // The sweep works in a scratch buffer so that repeated backward calls
        // add one clean pass each instead of re-propagating old gradient.
        let mut sweep: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let accum = |nodes: &[Node], sweep: &mut Vec<Option<Vec<f64>>>, id: TensorId, contrib: &[f64]| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let g = sweep[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].data.len()]);
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        };
        accum(&self.nodes, &mut sweep, root, &[1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || sweep[i].is_none() {
                continue;
            }
            let g = sweep[i].clone().unwrap();
            let op = self.nodes[i].op.clone();
            let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    if self.requires(a) {
                        let bd = &self.node(b).data;
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bd[p * n + j];
                                }
                                da[i2 * k + p] = s;
                            }
                        }
                        accum(&self.nodes, &mut sweep, a, &da);
                    }
                    if self.requires(b) {
                        let ad = &self.node(a).data;
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            for p in 0..k {
                                let a_ip = ad[i2 * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += a_ip * g[i2 * n + j];
                                }
                            }
                        }
                        accum(&self.nodes, &mut sweep, b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (am, an) = self.dims(a);
                    let mut da = vec![0.0; am * an];
                    for i2 in 0..am {
                        for j in 0..an {
                            da[i2 * an + j] = g[j * am + i2];
                        }
                    }
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::Add(a, b) => {
                    accum(&self.nodes, &mut sweep, a, &g);
                    accum(&self.nodes, &mut sweep, b, &g);
                }
                Op::Sub(a, b) => {
                    accum(&self.nodes, &mut sweep, a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accum(&self.nodes, &mut sweep, b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        let da: Vec<f64> = g.iter().zip(&self.node(b).data).map(|(gi, bi)| gi * bi).collect();
                        accum(&self.nodes, &mut sweep, a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> = g.iter().zip(&self.node(a).data).map(|(gi, ai)| gi * ai).collect();
                        accum(&self.nodes, &mut sweep, b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::AddRowVec(a, v) => {
                    accum(&self.nodes, &mut sweep, a, &g);
                    if self.requires(v) {
                        let n = cols;
                        let mut dv = vec![0.0; n];
                        for i2 in 0..rows {
                            for j in 0..n {
                                dv[j] += g[i2 * n + j];
                            }
                        }
                        accum(&self.nodes, &mut sweep, v, &dv);
                    }
                }
                Op::ScaleRows(a, v) => {
                    let n = cols;
                    if self.requires(a) {
                        let vd = &self.node(v).data;
                        let mut da = vec![0.0; rows * n];
                        for i2 in 0..rows {
                            for j in 0..n {
                                da[i2 * n + j] = g[i2 * n + j] * vd[i2];
                            }
                        }
                        accum(&self.nodes, &mut sweep, a, &da);
                    }
                    if self.requires(v) {
                        let ad = &self.node(a).data;
                        let mut dv = vec![0.0; rows];
                        for i2 in 0..rows {
                            for j in 0..n {
                                dv[i2] += g[i2 * n + j] * ad[i2 * n + j];
                            }
                        }
                        accum(&self.nodes, &mut sweep, v, &dv);
                    }
                }
                Op::RowSums(a) => {
                    let (am, an) = self.dims(a);
                    let mut da = vec![0.0; am * an];
                    for i2 in 0..am {
                        for j in 0..an {
                            da[i2 * an + j] = g[i2];
                        }
                    }
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::Recip(a) => {
                    let yd = &self.nodes[i].data;
                    let da: Vec<f64> = g.iter().zip(yd).map(|(gi, yi)| -gi * yi * yi).collect();
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::SumAll(a) => {
                    let (am, an) = self.dims(a);
                    let da = vec![g[0]; am * an];
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::MeanAll(a) => {
                    let (am, an) = self.dims(a);
                    let da = vec![g[0] / (am * an) as f64; am * an];
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::SqNorm(a) => {
                    let da: Vec<f64> = self.node(a).data.iter().map(|x| 2.0 * x * g[0]).collect();
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let n = cols;
                    let yd = &self.nodes[i].data;
                    let mut da = vec![0.0; rows * n];
                    for i2 in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i2 * n + j] * yd[i2 * n + j];
                        }
                        for j in 0..n {
                            da[i2 * n + j] = yd[i2 * n + j] * (g[i2 * n + j] - dot);
                        }
                    }
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::Silu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.node(a).data)
                        .map(|(gi, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::RmsNormRows(a, eps) => {
                    let n = cols;
                    let ad = &self.node(a).data;
                    let mut da = vec![0.0; rows * n];
                    for i2 in 0..rows {
                        let row = &ad[i2 * n..(i2 + 1) * n];
                        let ms: f64 = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
                        let r = (ms + eps).sqrt();
                        let mut gdotx = 0.0;
                        for j in 0..n {
                            gdotx += g[i2 * n + j] * row[j];
                        }
                        let c = gdotx / (n as f64 * r * r * r);
                        for j in 0..n {
                            da[i2 * n + j] = g[i2 * n + j] / r - c * row[j];
                        }
                    }
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::SliceRows(a, r0) => {
                    let (am, an) = self.dims(a);
                    let mut da = vec![0.0; am * an];
                    da[r0 * an..r0 * an + g.len()].copy_from_slice(&g);
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::SliceCols(a, c0) => {
                    let (am, an) = self.dims(a);
                    let w = cols;
                    let mut da = vec![0.0; am * an];
                    for i2 in 0..rows {
                        da[i2 * an + c0..i2 * an + c0 + w].copy_from_slice(&g[i2 * w..(i2 + 1) * w]);
                    }
                    accum(&self.nodes, &mut sweep, a, &da);
                }
                Op::ConcatRows(parts) => {
                    let n = cols;
                    let mut row_off = 0;
                    for p in parts {
                        let (pm, _) = self.dims(p);
                        let slice = g[row_off * n..(row_off + pm) * n].to_vec();
                        accum(&self.nodes, &mut sweep, p, &slice);
                        row_off += pm;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = cols;
                    let mut col_off = 0;
                    for p in parts {
                        let (pm, pn) = self.dims(p);
                        let mut dp = vec![0.0; pm * pn];
                        for i2 in 0..pm {
                            dp[i2 * pn..(i2 + 1) * pn]
                                .copy_from_slice(&g[i2 * total + col_off..i2 * total + col_off + pn]);
                        }
                        accum(&self.nodes, &mut sweep, p, &dp);
                        col_off += pn;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let (tm, tn) = self.dims(table);
                    let mut dt = vec![0.0; tm * tn];
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..tn {
                            dt[src * tn + j] += g[k * tn + j];
                        }
                    }
                    accum(&self.nodes, &mut sweep, table, &dt);
                }
            }
        }

        for (node, pass) in self.nodes.iter_mut().zip(sweep) {
            if let Some(p) = pass {
                match &mut node.grad {
                    Some(g) => {
                        for (gi, pi) in g.iter_mut().zip(&p) {
                            *gi += pi;
                        }
                    }
                    None => node.grad = Some(p),
                }
            }
        }
        Ok(())
    }
}

// ── finite-difference oracle ────────────────────────────────────────────────

/// Central-difference gradient of a scalar function; the reference every
/// backward rule is audited against.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + step;
        let hi = f(&work);
        work[i] = orig - step;
        let lo = f(&work);
        work[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Max relative deviation between two gradient vectors, with an absolute
/// floor so near-zero entries compare sanely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
