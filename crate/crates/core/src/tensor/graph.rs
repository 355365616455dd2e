use super::kernels::{self, gelu_derivative};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x) | Op::Scale(x, _) | Op::Gelu(x) | Op::Tanh(x) | Op::Sum(x) => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::Softmax { input, .. } => vec![*input],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations on tensors for reverse-mode differentiation.
///
/// Nodes are appended in creation order, and every op only refers to nodes
/// that already exist, so the node list is always a topological order.
/// Leaves created with [`Graph::param`] receive gradients; constants do not.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that accumulates gradients.
    pub fn param(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(true);
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a parameter leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x)?;
        if self.value(bias).numel() != cols {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(value.shape().to_vec(), data).unwrap();
        self.push(out, Op::Scale(x, factor))
    }

    /// Selects rows of a matrix by index; rows may repeat. Backward
    /// scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table)?;
        if indices.is_empty() {
            return Err(Error::Validation("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Validation(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([indices.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if len == 0 || start + len > rows {
            return Err(Error::Validation(format!(
                "row slice {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new([len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { input: x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.dims2(x)?;
        if len == 0 || start + len > cols {
            return Err(Error::Validation(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rows = data.len() / len;
        let out = Tensor::new([rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { input: x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows of nothing".into()))?;
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat_cols of nothing".into()))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax { input: x, axis }))
    }

    /// Normalizes each row (last dimension) to zero mean and unit variance,
    /// then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: T) -> Result<Var> {
        let value = self.value(x);
        let cols = *value.shape().last().unwrap();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(Error::shape("layer_norm", value.shape(), self.shape(p)));
            }
        }
        let (normalized, inv_std) = kernels::standardize(value.data(), cols, epsilon);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let data = normalized
            .chunks(cols)
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&n, (&gv, &bv))| n * gv + bv)
            })
            .collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(value.shape().to_vec(), data).unwrap();
        self.push(out, Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims2(logits)?;
        if labels.len() != batch {
            return Err(Error::Validation(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = kernels::softmax(self.value(logits).data(), batch, classes, 1);
        let x = self.value(logits).data();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += log_sum - row[label];
        }
        let loss = total / T::from_usize(batch).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a one-element `loss`, adding the result into the
    /// gradient of every reachable parameter leaf. Gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    ///
    /// Returns the number of nodes visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        for i in (0..n).rev() {
            if reachable[i] {
                for input in self.nodes[i].op.inputs() {
                    reachable[input.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            visited += 1;
            let Some(dy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let value = &mut self.nodes[i].value;
                if value.requires_grad() {
                    value.accumulate_grad(&dy);
                }
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        Ok(visited)
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let (_, n) = self.dims2(*b).unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                kernels::matmul_nt(dy, bv, slot(grads, *a, m * k), m, n, k);
                kernels::matmul_tn(av, dy, slot(grads, *b, k * n), m, k, n);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x).unwrap();
                let dx = kernels::transpose(dy, c, r);
                add_into(slot(grads, *x, r * c), &dx);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, dy.len()), dy);
                add_into(slot(grads, *b, dy.len()), dy);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                for (g, (&d, &w)) in slot(grads, *a, dy.len()).iter_mut().zip(dy.iter().zip(bv)) {
                    *g += d * w;
                }
                for (g, (&d, &w)) in slot(grads, *b, dy.len()).iter_mut().zip(dy.iter().zip(av)) {
                    *g += d * w;
                }
            }
            Op::AddRowBias(x, bias) => {
                add_into(slot(grads, *x, dy.len()), dy);
                let cols = self.value(*bias).numel();
                let gb = slot(grads, *bias, cols);
                for row in dy.chunks(cols) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, factor) => {
                for (g, &d) in slot(grads, *x, dy.len()).iter_mut().zip(dy) {
                    *g += d * *factor;
                }
            }
            Op::GatherRows { table, indices } => {
                let (rows, cols) = self.dims2(*table).unwrap();
                let gt = slot(grads, *table, rows * cols);
                for (r, &src) in indices.iter().enumerate() {
                    add_into(
                        &mut gt[src * cols..(src + 1) * cols],
                        &dy[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::SliceRows { input, start } => {
                let (rows, cols) = self.dims2(*input).unwrap();
                let gx = slot(grads, *input, rows * cols);
                add_into(&mut gx[start * cols..start * cols + dy.len()], dy);
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = self.dims2(*input).unwrap();
                let width = node.value.shape()[1];
                let gx = slot(grads, *input, rows * cols);
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + width],
                        &dy[r * width..(r + 1) * width],
                    );
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    add_into(slot(grads, *p, len), &dy[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).shape()[1];
                    let gp = slot(grads, *p, rows * width);
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * width..(r + 1) * width],
                            &dy[r * cols + offset..r * cols + offset + width],
                        );
                    }
                    offset += width;
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis).unwrap();
                let dx = kernels::softmax_backward(y, dy, outer, len, inner);
                add_into(slot(grads, *input, dx.len()), &dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = self.value(*gain).numel();
                let g = self.value(*gain).data();
                let n = T::from_usize(cols).unwrap();
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); dy.len()];
                for (r, &s) in inv_std.iter().enumerate() {
                    let range = r * cols..(r + 1) * cols;
                    let dyr = &dy[range.clone()];
                    let xh = &normalized[range.clone()];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..cols {
                        let dxh = dyr[c] * g[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                        dgain[c] += dyr[c] * xh[c];
                        dbias[c] += dyr[c];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    for c in 0..cols {
                        dx[r * cols + c] = s * (dyr[c] * g[c] - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                add_into(slot(grads, *input, dx.len()), &dx);
                add_into(slot(grads, *gain, cols), &dgain);
                add_into(slot(grads, *bias, cols), &dbias);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                for (g, (&d, &v)) in slot(grads, *x, dy.len()).iter_mut().zip(dy.iter().zip(xv)) {
                    *g += d * gelu_derivative(v);
                }
            }
            Op::Tanh(x) => {
                for (g, (&d, &t)) in slot(grads, *x, dy.len()).iter_mut().zip(dy.iter().zip(y)) {
                    *g += d * (T::one() - t * t);
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                for g in slot(grads, *x, len).iter_mut() {
                    *g += dy[0];
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).shape()[1];
                let batch = labels.len();
                let scale = dy[0] / T::from_usize(batch).unwrap();
                let gl = slot(grads, *logits, batch * classes);
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let target = if c == label { T::one() } else { T::zero() };
                        gl[r * classes + c] += (probs[r * classes + c] - target) * scale;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
