//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are row-major `f64` buffers with one to three axes. A [`Tape`]
//! records every primitive applied to its [`Var`] handles; calling
//! [`Tape::backward`] on a scalar consumes the tape and returns the
//! gradient of that scalar with respect to every leaf that requires one.
//!
//! Matrix conventions: a 2-axis tensor `[rows, cols]`. In `matmul` a
//! 1-axis left operand is a row vector and a 1-axis right operand is a
//! column vector.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} has every key masked")]
    InvalidMask { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::Contract(format!(
                "tensors have 1 to 3 axes, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count when read as a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count when read as a matrix (the length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Column `col` of a 2-axis tensor, copied out.
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, col)).collect()
    }

    pub fn transposed(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean key mask for [`Tape::softmax`]; `true` marks an allowed key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl KeyMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(TensorError::Contract(format!(
                "mask of {rows}x{cols} needs {} flags, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Query `i` may attend to key `j` only when `j <= i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }
}

/// Handle to a value recorded on a [`Tape`].
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        alpha: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Lookup {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    SumSquares(Var),
    Dropout {
        x: Var,
        factors: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape is owned by one worker; `backward` consumes it.
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Matrix product. Inner dimensions must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() > 2 || sb.len() > 2 || (sa.len() == 1 && sb.len() == 1) {
            return Err(self.mismatch("matmul", a, b));
        }
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, p) = match sb.len() {
            1 => (sb[0], 1),
            _ => (sb[0], sb[1]),
        };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out_shape = match (sa.len(), sb.len()) {
            (1, _) => vec![p],
            (_, 1) => vec![n],
            _ => vec![n, p],
        };
        let data = gemm(self.value(a).data(), self.value(b).data(), n, k, p);
        Ok(self.push(Tensor::new(out_shape, data)?, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose needs a matrix, got {:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).transposed();
        Ok(self.push(value, &[x], Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, &[x, bias], Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.map(x, |v| v * factor)?;
        Ok(self.push(value, &[x], Op::Scale(x, factor)))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0))?;
        Ok(self.push(value, &[x], Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid)?;
        Ok(self.push(value, &[x], Op::Sigmoid(x)))
    }

    /// `ln(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, log_sigmoid)?;
        Ok(self.push(value, &[x], Op::LogSigmoid(x)))
    }

    /// Row-wise softmax over keys. Masked keys get exactly zero weight and
    /// are left out of the normalization.
    pub fn softmax(&mut self, scores: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let v = self.value(scores);
        if v.shape().len() > 2 {
            return Err(TensorError::Contract("softmax over more than 2 axes".into()));
        }
        let (rows, cols) = (v.rows(), v.cols());
        if let Some(m) = mask {
            if m.rows != rows || m.cols != cols {
                return Err(TensorError::Shape {
                    op: "softmax",
                    left: v.shape().to_vec(),
                    right: vec![m.rows, m.cols],
                });
            }
        }
        let allowed = |r: usize, c: usize| mask.is_none_or(|m| m.allows(r, c));
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = v.row(r);
            let max = (0..cols)
                .filter(|&c| allowed(r, c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::InvalidMask { row: r });
            }
            let mut total = 0.0;
            for c in (0..cols).filter(|&c| allowed(r, c)) {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
            for c in (0..cols).filter(|&c| allowed(r, c)) {
                out[r * cols + c] /= total;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, &[scores], Op::Softmax(scores)))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// scales by `alpha` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, alpha: Var, beta: Var, epsilon: f64) -> Result<Var> {
        if epsilon <= 0.0 {
            return Err(TensorError::Contract("layer_norm epsilon must be > 0".into()));
        }
        let d = self.value(x).cols();
        if self.shape(alpha) != [d] {
            return Err(self.mismatch("layer_norm", x, alpha));
        }
        if self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let (a, b) = (self.value(alpha).data(), self.value(beta).data());
        let rows = self.value(x).rows();
        let mut normalized = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks(d) {
            // a constant row normalizes to exactly zero
            let mean = if row.iter().all(|&v| v == row[0]) {
                row[0]
            } else {
                row.iter().sum::<f64>() / d as f64
            };
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std.push(inv);
            for (k, &v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normalized.push(n);
                out.push(a[k] * n + b[k]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            &[x, alpha, beta],
            Op::LayerNorm {
                x,
                alpha,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers columns `ids` of a `[d, n]` table into the rows of a
    /// `[ids.len(), d]` matrix.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::Contract("lookup needs a 2-axis table".into()));
        }
        let (d, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::Index { index: id, len: n });
            }
            out.extend((0..d).map(|r| t.at(r, id)));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            &[table],
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Column `id` of a `[d, n]` table as a length-`d` vector.
    pub fn column(&mut self, table: Var, id: usize) -> Result<Var> {
        let rows = self.lookup(table, &[id])?;
        let d = self.value(rows).cols();
        self.reshape(rows, &[d])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(TensorError::Contract("slice_rows needs a matrix".into()));
        }
        if start + len > v.rows() {
            return Err(TensorError::Index {
                index: start + len,
                len: v.rows(),
            });
        }
        let c = v.cols();
        let value = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, &[x], Op::SliceRows { x, start }))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(x, i, 1)?;
        let c = self.value(r).cols();
        self.reshape(r, &[c])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).rows() != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("stack of nothing".into()))?;
        let d = self.value(first).len();
        for &p in parts {
            if self.shape(p) != [d] {
                return Err(self.mismatch("stack_rows", first, p));
            }
        }
        let out = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let value = Tensor::new(vec![parts.len(), d], out)?;
        Ok(self.push(value, parts, Op::StackRows(parts.to_vec())))
    }

    /// Sums the rows of a matrix into one vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        Ok(self.push(Tensor::vector(out), &[x], Op::SumRows(x)))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), &[x], Op::SumAll(x)))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum_of_squares();
        Ok(self.push(Tensor::scalar(total), &[x], Op::SumSquares(x)))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let factors: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&factors).map(|(a, f)| a * f).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, &[x], Op::Dropout { x, factors }))
    }

    /// Propagates gradients from the scalar `loss` back to every leaf
    /// that requires one. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &dyn Fn(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(buf);
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k) = (av.rows(), av.cols());
                    let p = if bv.shape().len() == 1 { 1 } else { bv.cols() };
                    acc(&mut grads, *a, &|ga| {
                        // dA = dC · Bᵀ
                        for i in 0..n {
                            for l in 0..k {
                                let brow = &bv.data()[l * p..(l + 1) * p];
                                let grow = &g[i * p..(i + 1) * p];
                                ga[i * k + l] += dot(grow, brow);
                            }
                        }
                    });
                    acc(&mut grads, *b, &|gb| {
                        // dB = Aᵀ · dC
                        for i in 0..n {
                            let grow = &g[i * p..(i + 1) * p];
                            for l in 0..k {
                                let a_il = av.data()[i * k + l];
                                if a_il == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[l * p..(l + 1) * p].iter_mut().zip(grow) {
                                    *o += a_il * gv;
                                }
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (out.rows(), out.cols());
                    acc(&mut grads, *x, &|gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Reshape(x) => acc(&mut grads, *x, &|gx| add_into(gx, &g)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &|ga| add_into(ga, &g));
                    acc(&mut grads, *b, &|gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &|ga| add_into(ga, &g));
                    acc(&mut grads, *b, &|gb| {
                        for (o, v) in gb.iter_mut().zip(&g) {
                            *o -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&mut grads, *a, &|ga| {
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    });
                    acc(&mut grads, *b, &|gb| {
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gv * x;
                        }
                    });
                }
                Op::AddRowBias(x, bias) => {
                    acc(&mut grads, *x, &|gx| add_into(gx, &g));
                    let c = out.cols();
                    acc(&mut grads, *bias, &|gb| {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Scale(x, f) => acc(&mut grads, *x, &|gx| {
                    for (o, v) in gx.iter_mut().zip(&g) {
                        *o += f * v;
                    }
                }),
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, *x, &|gx| {
                        for ((o, gv), v) in gx.iter_mut().zip(&g).zip(xv) {
                            if *v > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, &|gx| {
                    for ((o, gv), s) in gx.iter_mut().zip(&g).zip(out.data()) {
                        *o += gv * s * (1.0 - s);
                    }
                }),
                Op::LogSigmoid(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, *x, &|gx| {
                        for ((o, gv), v) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += gv * sigmoid(-v);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let c = out.cols();
                    acc(&mut grads, *x, &|gx| {
                        for ((gx_row, y), gy) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                            let inner = dot(y, gy);
                            for ((o, yv), gv) in gx_row.iter_mut().zip(y).zip(gy) {
                                *o += yv * (gv - inner);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    alpha,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let d = out.cols();
                    let a = nodes[alpha.0].value.data();
                    acc(&mut grads, *beta, &|gb| {
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    });
                    acc(&mut grads, *alpha, &|ga| {
                        for (row, nrow) in g.chunks(d).zip(normalized.chunks(d)) {
                            for ((o, gv), n) in ga.iter_mut().zip(row).zip(nrow) {
                                *o += gv * n;
                            }
                        }
                    });
                    acc(&mut grads, *x, &|gx| {
                        for (r, ((gx_row, grow), nrow)) in
                            gx.chunks_mut(d).zip(g.chunks(d)).zip(normalized.chunks(d)).enumerate()
                        {
                            let gn: Vec<f64> = grow.iter().zip(a).map(|(gv, av)| gv * av).collect();
                            let mean_gn = gn.iter().sum::<f64>() / d as f64;
                            let mean_gn_n = dot(&gn, nrow) / d as f64;
                            for ((o, gnv), n) in gx_row.iter_mut().zip(&gn).zip(nrow) {
                                *o += inv_std[r] * (gnv - mean_gn - n * mean_gn_n);
                            }
                        }
                    });
                }
                Op::Lookup { table, ids } => {
                    let n = nodes[table.0].value.cols();
                    let d = out.cols();
                    acc(&mut grads, *table, &|gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for k in 0..d {
                                gt[k * n + id] += g[r * d + k];
                            }
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let c = out.cols();
                    acc(&mut grads, *x, &|gx| {
                        add_into(&mut gx[start * c..start * c + g.len()], &g);
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(&mut grads, *p, &|gp| {
                            for (gp_row, grow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(gp_row, &grow[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::StackRows(parts) => {
                    let d = out.cols();
                    for (r, p) in parts.iter().enumerate() {
                        acc(&mut grads, *p, &|gp| add_into(gp, &g[r * d..(r + 1) * d]));
                    }
                }
                Op::SumRows(x) => {
                    let c = out.len();
                    acc(&mut grads, *x, &|gx| {
                        for row in gx.chunks_mut(c) {
                            add_into(row, &g);
                        }
                    });
                }
                Op::SumAll(x) => acc(&mut grads, *x, &|gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }),
                Op::SumSquares(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, *x, &|gx| {
                        for (o, v) in gx.iter_mut().zip(xv) {
                            *o += 2.0 * v * g[0];
                        }
                    });
                }
                Op::Dropout { x, factors } => acc(&mut grads, *x, &|gx| {
                    for ((o, gv), f) in gx.iter_mut().zip(&g).zip(factors) {
                        *o += gv * f;
                    }
                }),
            }
        }

        let shapes = nodes.into_iter().map(|n| n.value.shape).collect();
        Ok(Gradients { grads: leaves, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is not a reachable
    /// differentiable leaf.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v` as a flat slice; zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// Zero entries of `a` are skipped, so masked attention weights never touch
// the accumulator.
fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[l * p..(l + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Result of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// finite differences for every coordinate of every input. The error of a
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradientCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradientCheck {
        max_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (k, (&base, &a)) in input.data().iter().zip(&analytic[i]).enumerate() {
            probe[i].data_mut()[k] = base + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = base - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * step);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_error {
                report = GradientCheck {
                    max_error: err,
                    worst: (i, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`gradient_check`]; returns the max relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step).map(|r| r.max_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_construction_checks_length_and_axes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(vec![2, 1, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let id = t.constant(m(&[&[1., 0.], &[0., 1.]]));
        let x = t.constant(m(&[&[1., 2.], &[3., 4.]]));
        let y = t.matmul(id, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let z = t.constant(Tensor::zeros(&[2, 2]));
        let r = t.constant(m(&[&[5., 6., 7.], &[8., 9., 10.]]));
        let zr = t.matmul(z, r).unwrap();
        assert!(t.value(zr).data().iter().all(|&v| v == 0.0));

        let col = t.constant(m(&[&[5.], &[6.]]));
        let p = t.matmul(x, col).unwrap();
        assert_eq!(t.value(p).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (n, k, p) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let a = random(&[n, k], &mut rng);
            let b = random(&[k, p], &mut rng);
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.matmul(va, vb).unwrap();
            for i in 0..n {
                for j in 0..p {
                    let mut s = 0.0;
                    for l in 0..k {
                        s += a.at(i, l) * b.at(l, j);
                    }
                    assert!((t.value(c).at(i, j) - s).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let p = t.softmax(s, None).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);

        let s = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let p = t.softmax(s, None).unwrap();
        let v = t.value(p).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let s = t.constant(m(&[&[3.0, 8.0]]));
        let mask = KeyMask::new(1, 2, vec![true, false]).unwrap();
        let p = t.softmax(s, Some(&mask)).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[2, 2]));
        let mask = KeyMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(
            t.softmax(s, Some(&mask)).unwrap_err(),
            TensorError::InvalidMask { row: 1 }
        );
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = KeyMask::causal(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let alpha = t.constant(Tensor::vector(vec![3.0, -2.0, 0.5]));
        let beta = t.constant(Tensor::vector(vec![0.25, 1.5, -4.0]));
        let x = t.constant(Tensor::vector(vec![7.0; 3]));
        let y = t.layer_norm(x, alpha, beta, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.25, 1.5, -4.0]);

        let ones = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let zeros = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = t.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!((t.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((t.value(y).data()[1] + 1.0).abs() < 1e-9);

        let ones = t.constant(Tensor::vector(vec![1.0; 3]));
        let zeros = t.constant(Tensor::vector(vec![0.0; 3]));
        let x = t.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let y = t.layer_norm(x, ones, zeros, 1e-12).unwrap();
        // direct evaluation: mean 4, variance 8/3
        let s = (8.0f64 / 3.0).sqrt();
        for (got, want) in t.value(y).data().iter().zip([-2.0 / s, 0.0, 2.0 / s]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((t.value(y).data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_epsilon() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let a = t.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(t.layer_norm(x, a, a, 0.0).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        let n = t.constant(Tensor::scalar(-3.0));
        let r = t.relu(n).unwrap();
        assert_eq!(t.value(r).data(), &[0.0]);
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        let bad = t.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(t.add(a, bad), Err(TensorError::Shape { .. })));
        assert!(matches!(t.mul(a, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fd_check_of_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = finite_difference_check(|t, x| t.sum(x), &x, 1e-4).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn fd_check_sigmoid_of_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&[6], &mut rng);
        let x = random(&[6], &mut rng);
        let err = finite_difference_check(
            |t, x| {
                let w = t.constant(w.clone());
                let p = t.mul(w, x)?;
                let d = t.sum(p)?;
                t.sigmoid(d)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let r = gradient_check(f, inputs, 1e-4).unwrap();
        assert!(r.max_error < 1e-3, "{r:?}");
    }

    #[test]
    fn every_primitive_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let v4 = random(&[4], &mut rng);
        let v3 = random(&[3], &mut rng);
        let w = random(&[3, 4], &mut rng);

        // weighted sums keep the scalar loss sensitive to every entry
        let weigh = |t: &mut Tape, x: Var| -> Result<Var> {
            let shape = t.value(x).shape().to_vec();
            let n: usize = shape.iter().product();
            let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
            let w = t.constant(w);
            let p = t.mul(x, w)?;
            t.sum(p)
        };

        check(&[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y)
        });
        check(&[a.clone(), v4.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y)
        });
        check(&[v3.clone(), a.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let y = t.transpose(v[0])?;
            weigh(t, y)
        });
        check(&[a.clone(), w.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.sub(x, v[1])?;
            let z = t.mul(y, v[1])?;
            weigh(t, z)
        });
        check(&[a.clone(), v4.clone()], |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            weigh(t, y)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], -2.5)?;
            let r = t.relu(y)?;
            weigh(t, r)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let s = t.sigmoid(v[0])?;
            let l = t.log_sigmoid(v[0])?;
            let y = t.add(s, l)?;
            weigh(t, y)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let y = t.softmax(v[0], None)?;
            weigh(t, y)
        });
        check(&[random(&[3, 3], &mut rng)], |t, v| {
            let y = t.softmax(v[0], Some(&KeyMask::causal(3)))?;
            weigh(t, y)
        });
        check(&[a.clone(), v4.clone(), random(&[4], &mut rng)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weigh(t, y)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let y = t.lookup(v[0], &[1, 3, 1])?;
            let c = t.column(v[0], 2)?;
            let a = weigh(t, y)?;
            let b = weigh(t, c)?;
            t.add(a, b)
        });
        check(&[a.clone(), w.clone()], |t, v| {
            let s = t.slice_rows(v[0], 1, 2)?;
            let r = t.row(v[1], 2)?;
            let c = t.concat_cols(&[s, s])?;
            let st = t.stack_rows(&[r, r, r])?;
            let x = weigh(t, c)?;
            let y = weigh(t, st)?;
            t.add(x, y)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let s = t.sum_rows(v[0])?;
            let m = t.mean_rows(v[0])?;
            let q = t.sum_squares(v[0])?;
            let x = weigh(t, s)?;
            let y = weigh(t, m)?;
            let z = t.add(x, y)?;
            t.add(z, q)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let y = t.dropout(v[0], 0.5, &mut r)?;
            weigh(t, y)
        });
    }

    #[test]
    fn random_composite_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let x = random(&[3, 4], &mut rng);
            let w = random(&[4, 4], &mut rng);
            let bias = random(&[4], &mut rng);
            check(&[x, w, bias], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row_bias(h, v[2])?;
                let s = t.softmax(h, None)?;
                let r = t.sigmoid(h)?;
                let m = t.mul(s, r)?;
                let ht = t.transpose(m)?;
                let p = t.matmul(ht, v[0])?;
                let q = t.sum_squares(p)?;
                t.log_sigmoid(q)
            });
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scaling_is_inverted() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.param(Tensor::vector(vec![1.0; 1000]));
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        let v = t.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-50.0f64..50.0, 16),
            mask_bits in proptest::collection::vec(any::<bool>(), 16),
        ) {
            let mut allowed = mask_bits.clone();
            for r in 0..4 { allowed[r * 4] = true; }
            let mask = KeyMask::new(4, 4, allowed.clone()).unwrap();
            let mut t = Tape::new();
            let s = t.constant(Tensor::matrix(4, 4, vals).unwrap());
            let p = t.softmax(s, Some(&mask)).unwrap();
            let out = t.value(p);
            for r in 0..4 {
                let row = out.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    prop_assert!((0.0..=1.0).contains(&row[c]));
                    if !allowed[r * 4 + c] { prop_assert_eq!(row[c], 0.0); }
                }
            }
        }

        #[test]
        fn layer_norm_of_constant_is_beta(c in -1e3f64..1e3, beta in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(vec![c; 5]));
            let a = t.constant(Tensor::vector(vec![2.0; 5]));
            let b = t.constant(Tensor::vector(beta.clone()));
            let y = t.layer_norm(x, a, b, 1e-5).unwrap();
            prop_assert_eq!(t.value(y).data(), &beta[..]);
        }
    }
}
