use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a tape node, together with whatever the backward
/// rule needs beyond the node's own output value.
#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    MultiplyScalar(Var, f64),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LogSoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    RmsNormRows { x: Var, inv_rms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    TakeRows { x: Var, rows: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    Mean(Var),
    Sum(Var),
    LayerScale { x: Var, scale: Var },
    RowFunctional { x: Var, local_grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

const RMS_EPS: f64 = 1e-6;

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the list is a topological
/// order of the graph and backward is a single reverse sweep. Forward values
/// are computed eagerly when an operation is recorded.
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{what} produced a non-finite value")));
        }
        Ok(self.push(value, op))
    }

    /// A differentiable input; [`Tape::backward`] returns a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric("non-finite leaf"));
        }
        Ok(self.push(value, Op::Leaf))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric("non-finite constant"));
        }
        Ok(self.push(value, Op::Constant))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|e| Error::contract(format!("{what}: {e}")))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul inner dims differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::contract(format!(
                "add shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push_checked(out, Op::Add(a, b), "add")
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::contract(format!(
                "add_row bias has {} values for {n} columns",
                b.len()
            )));
        }
        let mut out = self.value(x).clone();
        let bdata = b.data().to_vec();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&bdata) {
                *o += bv;
            }
        }
        self.push_checked(out, Op::AddRow { x, bias }, "add_row")
    }

    pub fn multiply_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::numeric("multiply_scalar by non-finite constant"));
        }
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push_checked(out, Op::MultiplyScalar(x, c), "multiply_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.max(0.0)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::Relu(x)))
    }

    /// Selects rows of a `[vocab, dim]` table by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.matrix_dims(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for {vocab} rows"
            )));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::from_parts(vec![ids.len(), dim], data);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "log_softmax_rows")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = v.row(r);
            let lse = kernels::log_sum_exp(row);
            data.extend(row.iter().map(|a| a - lse));
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.push_checked(out, Op::LogSoftmaxRows(x), "log_softmax_rows")
    }

    /// Row softmax of a square score matrix restricted to the lower triangle:
    /// entry `(i, j)` is zero for `j > i`.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "causal_softmax_rows")?;
        if m != n {
            return Err(Error::contract(format!(
                "causal softmax needs a square matrix, got [{m},{n}]"
            )));
        }
        let v = self.value(x);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &v.row(r)[..=r];
            kernels::softmax_into(row, &mut data[r * n..r * n + r + 1]);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::CausalSoftmaxRows(x)))
    }

    /// Scales each row to unit root-mean-square.
    pub fn rms_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "rms_norm_rows")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        let mut inv_rms = Vec::with_capacity(m);
        for r in 0..m {
            let row = v.row(r);
            let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().map(|a| a * inv));
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::RmsNormRows { x, inv_rms }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::contract(format!(
                "column slice {start}..{} outside {n} columns",
                start + len
            )));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.matrix_dims(p, "concat_cols")?);
        }
        let m = dims[0].0;
        if dims.iter().any(|&(r, _)| r != m) {
            return Err(Error::contract("concat_cols row counts differ"));
        }
        let n: usize = dims.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects whole rows (with repetition allowed) of a matrix.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "take_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::contract(format!("take_rows indices invalid for {m} rows")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), n], data);
        Ok(self.push(
            out,
            Op::TakeRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Picks entry `(rows[i], cols[i])` for every `i`, yielding a vector.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() || rows.len() != cols.len() {
            return Err(Error::contract("gather_rows needs equal, nonempty index lists"));
        }
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(Error::contract(format!("gather_rows index outside [{m},{n}]")));
        }
        let v = self.value(x);
        let data = rows.iter().zip(cols).map(|(&r, &c)| v.data()[r * n + c]).collect();
        let out = Tensor::from_parts(vec![rows.len()], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_parts(vec![1], vec![v.sum() / v.len() as f64]);
        Ok(self.push(out, Op::Mean(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::from_parts(vec![1], vec![self.value(x).sum()]);
        self.push_checked(out, Op::Sum(x), "sum")
    }

    /// Multiplies a tensor by a one-element tensor that is itself on the tape,
    /// so the scale factor receives a gradient.
    pub fn layer_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let s = self.value(scale).item()?;
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * s).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push_checked(out, Op::LayerScale { x, scale }, "layer_scale")
    }

    /// Applies a scalar function to every row of a matrix, producing a vector.
    ///
    /// `f` receives `(row_index, row)` and returns the value together with
    /// the gradient of that value with respect to the row, which is cached
    /// for the backward sweep. Used for fused per-row losses (divergences,
    /// entropy) whose gradients have closed forms.
    pub fn row_functional<F>(&mut self, x: Var, mut f: F) -> Result<Var>
    where
        F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
    {
        let (m, n) = self.matrix_dims(x, "row_functional")?;
        let v = self.value(x);
        let mut values = Vec::with_capacity(m);
        let mut grad = Vec::with_capacity(m * n);
        for r in 0..m {
            let (val, g) = f(r, v.row(r));
            if g.len() != n {
                return Err(Error::contract("row_functional gradient length mismatch"));
            }
            values.push(val);
            grad.extend(g);
        }
        let local_grad = Tensor::new(vec![m, n], grad)?;
        let out = Tensor::from_parts(vec![m], values);
        self.push_checked(out, Op::RowFunctional { x, local_grad }, "row_functional")
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match node.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked at record");
                let n = self.value(*b).shape()[1];
                if self.wants_grad(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants_grad(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, m, k, n);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("checked at record");
                let da = kernels::transpose(gd, n, m);
                accumulate(grads, *a, Tensor::from_parts(vec![m, n], da));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow { x, bias } => {
                accumulate(grads, *x, g.clone());
                let (m, n) = g.dims2().expect("matrix");
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for (d, v) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::from_parts(shape, db));
            }
            Op::MultiplyScalar(x, c) => {
                let data = gd.iter().map(|v| v * c).collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Relu(x) => {
                let out = node.value.data();
                let data = gd
                    .iter()
                    .zip(out)
                    .map(|(v, o)| if *o > 0.0 { *v } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Embedding { table, ids } => {
                if !self.wants_grad(*table) {
                    return;
                }
                let shape = self.value(*table).shape().to_vec();
                let dim = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let dtd = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dtd[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&gd[r * dim..(r + 1) * dim])
                    {
                        *d += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = g.dims2().expect("matrix");
                let out = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    let total: f64 = grow.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = grow[j] - out[r * n + j].exp() * total;
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
            Op::CausalSoftmaxRows(x) => {
                let (m, n) = g.dims2().expect("matrix");
                let p = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let prow = &p[r * n..r * n + r + 1];
                    let grow = &gd[r * n..r * n + r + 1];
                    let inner = kernels::dot(prow, grow);
                    for j in 0..=r {
                        dx[r * n + j] = prow[j] * (grow[j] - inner);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
            Op::RmsNormRows { x, inv_rms } => {
                let (m, n) = g.dims2().expect("matrix");
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yrow = &y[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let proj = kernels::dot(grow, yrow) / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_rms[r] * (grow[j] - yrow[j] * proj);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().expect("matrix");
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(&[m, n]);
                let dxd = dx.data_mut();
                for r in 0..m {
                    dxd[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2().expect("matrix");
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(m * width);
                    for r in 0..m {
                        dp.extend_from_slice(&gd[r * n + offset..r * n + offset + width]);
                    }
                    accumulate(grads, p, Tensor::from_parts(vec![m, width], dp));
                    offset += width;
                }
            }
            Op::TakeRows { x, rows } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dxd[r * n..(r + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, rows, cols } => {
                let shape = self.value(*x).shape().to_vec();
                let n = shape[1];
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for (i, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                    dxd[r * n + c] += gd[i];
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let each = gd[0] / v.len() as f64;
                accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(v.shape().to_vec(), vec![each; v.len()]),
                );
            }
            Op::Sum(x) => {
                let v = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(v.shape().to_vec(), vec![gd[0]; v.len()]),
                );
            }
            Op::LayerScale { x, scale } => {
                let s = self.value(*scale).data()[0];
                let xv = self.value(*x);
                if self.wants_grad(*x) {
                    let data = gd.iter().map(|v| v * s).collect();
                    accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
                }
                let ds = kernels::dot(gd, xv.data());
                let shape = self.value(*scale).shape().to_vec();
                accumulate(grads, *scale, Tensor::from_parts(shape, vec![ds]));
            }
            Op::RowFunctional { x, local_grad } => {
                let (m, n) = local_grad.dims2().expect("matrix");
                let lg = local_grad.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        dx[r * n + j] = gd[r] * lg[r * n + j];
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
        }
    }

    /// Constants never need gradients; skipping them saves the two largest
    /// products in a forward pass over frozen weights.
    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
