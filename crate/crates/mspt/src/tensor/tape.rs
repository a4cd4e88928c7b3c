use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Value, b: Value },
    Transpose { x: Value },
    Add { a: Value, b: Value },
    AddBias { x: Value, bias: Value },
    Mul { a: Value, b: Value },
    Scale { x: Value, c: f64 },
    ScaleBy { x: Value, s: Value },
    Sigmoid { x: Value },
    Tanh { x: Value },
    Relu { x: Value },
    Log { x: Value },
    ClampMin { x: Value, floor: f64 },
    Softmax { x: Value, axis: usize },
    Concat { xs: Vec<Value>, axis: usize },
    Narrow { x: Value, axis: usize, start: usize },
    GatherRows { table: Value, ids: Vec<usize> },
    SelectPerRow { x: Value, ids: Vec<usize> },
    Sum { x: Value },
    Mean { x: Value },
    LayerNorm { x: Value, gamma: Value, beta: Value, eps: f64 },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended in execution order, so the record is already a
/// topological sort and [`Tape::backward`] visits each node exactly once
/// in reverse. Gradients accumulate across repeated backward calls until
/// the tape is dropped.
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Value {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Value(id)
    }

    fn tracked(&self, v: Value) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Value) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// First node holding a NaN or infinity, for training diagnostics.
    pub fn first_nonfinite(&self) -> Option<(Value, String)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some((Value(i), format!("node {} ({})", i, op_name(&n.op))))
            }
        })
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Tracked leaf: participates in backward.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf: a constant input.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `x`'s value with the gradient path severed.
    pub fn detach(&mut self, x: Value) -> Value {
        let t = self.nodes[x.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b },
            tracked,
        ))
    }

    pub fn transpose(&mut self, x: Value) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "transpose requires rank 2, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose { x },
            tracked,
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, tracked))
    }

    /// `x + bias` with a rank-1 bias broadcast over rows; the only
    /// broadcasting this engine performs.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddBias { x, bias },
            tracked,
        ))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, tracked)
    }

    /// Multiply every element of `x` by the scalar node `s` (shape `[1,1]`).
    pub fn scale_by(&mut self, x: Value, s: Value) -> Result<Value> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "scale_by needs a scalar, got {:?}",
                self.nodes[s.0].value.shape()
            )));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| v * sv).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(Tensor { shape, data }, Op::ScaleBy { x, s }, tracked))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |xv| Op::Sigmoid { x: xv })
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        self.unary(x, |v| v.tanh(), |xv| Op::Tanh { x: xv })
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(x, |v| v.max(0.0), |xv| Op::Relu { x: xv })
    }

    pub fn log(&mut self, x: Value) -> Result<Value> {
        if let Some(v) = self.nodes[x.0].value.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(x, |v| v.ln(), |xv| Op::Log { x: xv }))
    }

    /// `max(x, floor)` elementwise; used to floor probabilities before logs.
    pub fn clamp_min(&mut self, x: Value, floor: f64) -> Value {
        self.unary(x, |v| v.max(floor), |xv| Op::ClampMin { x: xv, floor })
    }

    fn unary(&mut self, x: Value, f: impl Fn(f64) -> f64, op: impl Fn(Value) -> Op) -> Value {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor { shape, data }, op(x), tracked)
    }

    // ── structured ──────────────────────────────────────────────────

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape().len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let shape = t.shape().to_vec();
        let mut data = t.data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                data[i] = (data[i] - max).exp();
                sum += data[i];
            }
            for &i in idx {
                data[i] /= sum;
            }
        });
        let tracked = self.tracked(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, tracked))
    }

    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rank = self.nodes[xs[0].0].value.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                axis,
                shape: self.nodes[xs[0].0].value.shape().to_vec(),
            });
        }
        let mut out_shape = self.nodes[xs[0].0].value.shape().to_vec();
        for v in &xs[1..] {
            let s = self.nodes[v.0].value.shape();
            if s.len() != rank
                || (0..rank).any(|d| d != axis && s[d] != out_shape[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        if rank == 1 || axis == 0 {
            let mut off = 0;
            for v in xs {
                let t = &self.nodes[v.0].value;
                data[off..off + t.numel()].copy_from_slice(t.data());
                off += t.numel();
            }
        } else {
            // axis 1 of rank 2: interleave row blocks
            let rows = out_shape[0];
            let out_cols = out_shape[1];
            let mut col_off = 0;
            for v in xs {
                let t = &self.nodes[v.0].value;
                let c = t.shape()[1];
                for r in 0..rows {
                    data[r * out_cols + col_off..r * out_cols + col_off + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                col_off += c;
            }
        }
        let tracked = xs.iter().any(|v| self.tracked(*v));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Contiguous slice of `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        if start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow {}..{} out of bounds for axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = if shape.len() == 1 || axis == 0 {
            let row: usize = shape.iter().skip(1).product();
            t.data()[start * row..(start + len) * row].to_vec()
        } else {
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
            }
            out
        };
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Narrow { x, axis, start },
            tracked,
        ))
    }

    /// Rows of an embedding table: out[i, :] = table[ids[i], :].
    pub fn gather_rows(&mut self, table: Value, ids: &[usize]) -> Result<Value> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(Error::Contract("gather_rows needs a rank-2 table".into()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= rows) {
            return Err(Error::Contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), cols],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// One element per row: out[i, 0] = x[i, ids[i]].
    pub fn select_per_row(&mut self, x: Value, ids: &[usize]) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 || ids.len() != t.shape()[0] {
            return Err(Error::Contract(format!(
                "select_per_row needs one id per row ({} rows, {} ids)",
                t.rows(),
                ids.len()
            )));
        }
        let cols = t.shape()[1];
        if let Some(bad) = ids.iter().find(|i| **i >= cols) {
            return Err(Error::Contract(format!(
                "column id {bad} out of range for {cols} columns"
            )));
        }
        let data: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * cols + c])
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), 1],
                data,
            },
            Op::SelectPerRow {
                x,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Value) -> Value {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, tracked)
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(Error::Contract("layer_norm needs rank 2".into()));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = (row[j] - mu) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::LayerNorm { x, gamma, beta, eps },
            tracked,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each call adds dLoss/dNode into
    /// every tracked node reachable from `loss`; repeated calls without
    /// reset therefore accumulate.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || scratch[i].is_none() {
                continue;
            }
            let dy = scratch[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &dy, &mut scratch);
            scratch[i] = Some(dy);
        }
        for (i, adj) in scratch.into_iter().enumerate() {
            if let (Some(adj), true) = (adj, self.nodes[i].tracked) {
                let n = &mut self.nodes[i];
                let g = n.grad.get_or_insert_with(|| vec![0.0; n.value.numel()]);
                for (gi, vi) in g.iter_mut().zip(&adj) {
                    *gi += vi;
                }
            }
        }
        Ok(())
    }

    fn acc(&self, scratch: &mut [Option<Vec<f64>>], node: usize, vs: &[f64]) {
        let g = scratch[node].get_or_insert_with(|| vec![0.0; self.nodes[node].value.numel()]);
        for (gi, vi) in g.iter_mut().zip(vs) {
            *gi += vi;
        }
    }

    fn acc1(&self, scratch: &mut [Option<Vec<f64>>], node: usize, v: f64) {
        let g = scratch[node].get_or_insert_with(|| vec![0.0; self.nodes[node].value.numel()]);
        g[0] += v;
    }

    fn propagate(
        &self,
        out_id: usize,
        op: &Op,
        dy: &[f64],
        scratch: &mut [Option<Vec<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    let tb = &self.nodes[b.0].value;
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += d * tb.data()[p * n + j];
                            }
                        }
                    }
                    self.acc(scratch, a.0, &da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    let ta = &self.nodes[a.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * dy[i * n + j];
                            }
                        }
                    }
                    self.acc(scratch, b.0, &db);
                }
            }
            Op::Transpose { x } => {
                if self.tracked(*x) {
                    let (n, m) = {
                        let s = self.nodes[out_id].value.shape();
                        (s[0], s[1])
                    };
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = dy[i * m + j];
                        }
                    }
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.tracked(*a) {
                    self.acc(scratch, a.0, dy);
                }
                if self.tracked(*b) {
                    self.acc(scratch, b.0, dy);
                }
            }
            Op::AddBias { x, bias } => {
                if self.tracked(*x) {
                    self.acc(scratch, x.0, dy);
                }
                if self.tracked(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, d) in dy.iter().enumerate() {
                        db[i % n] += d;
                    }
                    self.acc(scratch, bias.0, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.tracked(*a) {
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(d, v)| d * v)
                        .collect();
                    self.acc(scratch, a.0, &da);
                }
                if self.tracked(*b) {
                    let db: Vec<f64> = dy
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(d, v)| d * v)
                        .collect();
                    self.acc(scratch, b.0, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.tracked(*x) {
                    let dx: Vec<f64> = dy.iter().map(|d| d * c).collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.tracked(*x) {
                    let dx: Vec<f64> = dy.iter().map(|d| d * sv).collect();
                    self.acc(scratch, x.0, &dx);
                }
                if self.tracked(*s) {
                    let ds: f64 = dy
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(d, v)| d * v)
                        .sum();
                    self.acc1(scratch, s.0, ds);
                }
            }
            Op::Sigmoid { x } => {
                if self.tracked(*x) {
                    let y = self.nodes[out_id].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(y)
                        .map(|(d, v)| d * v * (1.0 - v))
                        .collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.tracked(*x) {
                    let y = self.nodes[out_id].value.data();
                    let dx: Vec<f64> = dy.iter().zip(y).map(|(d, v)| d * (1.0 - v * v)).collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Relu { x } => {
                if self.tracked(*x) {
                    let xin = self.nodes[x.0].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xin)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Log { x } => {
                if self.tracked(*x) {
                    let xin = self.nodes[x.0].value.data();
                    let dx: Vec<f64> = dy.iter().zip(xin).map(|(d, v)| d / v).collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::ClampMin { x, floor } => {
                if self.tracked(*x) {
                    let xin = self.nodes[x.0].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xin)
                        .map(|(d, v)| if *v >= *floor { *d } else { 0.0 })
                        .collect();
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.tracked(*x) {
                    let y = self.nodes[out_id].value.data().to_vec();
                    let shape = self.nodes[out_id].value.shape().to_vec();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, *axis, |idx| {
                        let dot: f64 = idx.iter().map(|&i| dy[i] * y[i]).sum();
                        for &i in idx {
                            dx[i] = (dy[i] - dot) * y[i];
                        }
                    });
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[out_id].value.shape().to_vec();
                if out_shape.len() == 1 || *axis == 0 {
                    let mut off = 0;
                    for v in xs {
                        let numel = self.nodes[v.0].value.numel();
                        if self.tracked(*v) {
                            let slice = dy[off..off + numel].to_vec();
                            self.acc(scratch, v.0, &slice);
                        }
                        off += numel;
                    }
                } else {
                    let rows = out_shape[0];
                    let out_cols = out_shape[1];
                    let mut col_off = 0;
                    for v in xs {
                        let c = self.nodes[v.0].value.shape()[1];
                        if self.tracked(*v) {
                            let mut dv = vec![0.0; rows * c];
                            for r in 0..rows {
                                dv[r * c..(r + 1) * c].copy_from_slice(
                                    &dy[r * out_cols + col_off..r * out_cols + col_off + c],
                                );
                            }
                            self.acc(scratch, v.0, &dv);
                        }
                        col_off += c;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.tracked(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let out_shape = self.nodes[out_id].value.shape().to_vec();
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    if in_shape.len() == 1 || *axis == 0 {
                        let row: usize = in_shape.iter().skip(1).product();
                        dx[start * row..start * row + dy.len()].copy_from_slice(dy);
                    } else {
                        let (rows, cols, len) = (in_shape[0], in_shape[1], out_shape[1]);
                        for r in 0..rows {
                            dx[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&dy[r * len..(r + 1) * len]);
                        }
                    }
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.tracked(*table) {
                    let cols = self.nodes[table.0].value.shape()[1];
                    let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += dy[r * cols + j];
                        }
                    }
                    self.acc(scratch, table.0, &dt);
                }
            }
            Op::SelectPerRow { x, ids } => {
                if self.tracked(*x) {
                    let cols = self.nodes[x.0].value.shape()[1];
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (r, &c) in ids.iter().enumerate() {
                        dx[r * cols + c] += dy[r];
                    }
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Sum { x } => {
                if self.tracked(*x) {
                    let dx = vec![dy[0]; self.nodes[x.0].value.numel()];
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::Mean { x } => {
                if self.tracked(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let dx = vec![dy[0] / n as f64; n];
                    self.acc(scratch, x.0, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let t = self.nodes[x.0].value.clone();
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let g = self.nodes[gamma.0].value.data().to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dyr = &dy[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxhat = dyr[j] * g[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[j];
                        dgamma[j] += dyr[j] * xhat[j];
                        dbeta[j] += dyr[j];
                    }
                    for j in 0..n {
                        let dxhat = dyr[j] * g[j];
                        dx[r * n + j] = inv
                            * (dxhat - sum_dxhat / n as f64 - xhat[j] * sum_dxhat_xhat / n as f64);
                    }
                }
                if self.tracked(*x) {
                    self.acc(scratch, x.0, &dx);
                }
                if self.tracked(*gamma) {
                    self.acc(scratch, gamma.0, &dgamma);
                }
                if self.tracked(*beta) {
                    self.acc(scratch, beta.0, &dbeta);
                }
            }
        }
    }
}

/// Visit each 1-D lane of `shape` along `axis`, passing flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match shape.len() {
        1 => {
            let idx: Vec<usize> = (0..shape[0]).collect();
            f(&idx);
        }
        2 => {
            let (m, n) = (shape[0], shape[1]);
            if axis == 1 {
                for r in 0..m {
                    let idx: Vec<usize> = (0..n).map(|j| r * n + j).collect();
                    f(&idx);
                }
            } else {
                for c in 0..n {
                    let idx: Vec<usize> = (0..m).map(|i| i * n + c).collect();
                    f(&idx);
                }
            }
        }
        _ => panic!("rank > 2 unsupported"),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::ScaleBy { .. } => "scale_by",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::Log { .. } => "log",
        Op::ClampMin { .. } => "clamp_min",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::GatherRows { .. } => "gather_rows",
        Op::SelectPerRow { .. } => "select_per_row",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::LayerNorm { .. } => "layer_norm",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let sel = tape.constant(Tensor::matrix(&[vec![1.0, 0.0]]));
        let col = tape.constant(Tensor::matrix(&[vec![2.0], vec![5.0]]));
        let c = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let s = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let big = tape.constant(Tensor::row(vec![1000.0, 0.0]));
        let s2 = tape.softmax(big, 1).unwrap();
        let d = tape.value(s2).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[vec![1.0, -3.0, 0.5], vec![9.0, 9.0, 9.0]]));
        let s = tape.softmax(x, 1).unwrap();
        let t = tape.value(s);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| t.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn elementwise_trivials() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn concat_basics() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let empty = tape.constant(Tensor::vector(vec![]));
        let d = tape.concat(&[a, empty], 0).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_analytic() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn fan_out_sums_both_consumers() {
        // y = sum(x*x) + sum(x): dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let d = tape.detach(x);
        let prod = tape.mul(x, d).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        // d(x * const)/dx = const = 2, not 2x = 4
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn narrow_and_scatter_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let mid = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.0, 3.0, 5.0, 6.0]);
        let loss = tape.sum(mid);
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(&[vec![1.0, 1.0], vec![2.0, 2.0]]));
        let g = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).shape(), &[3, 2]);
        let loss = tape.sum(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
