//! The recorded computation: a Wengert list of primitive ops.
//!
//! Every operation appends one entry holding the op kind, input node ids and
//! the computed value. The backward pass (see `backward.rs`) replays entries
//! in reverse and emits its vector-Jacobian products as further entries on
//! the same tape, so gradients stay differentiable.

use crate::diffcore::{DiffError, Tensor};

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// Differentiable leaf.
    Var,
    /// Non-differentiable leaf.
    Const,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    MatVec,
    Outer,
    Transpose,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Square,
    Sqrt,
    Recip,
    Softmax,
    LogSumExp,
    Sum,
    SumLast,
    BroadcastLast(usize),
    Fill(Vec<usize>),
    MinScalar,
    Clamp { lo: f64, hi: f64 },
    Concat,
    Slice { start: usize, len: usize },
    Reshape(Vec<usize>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Var => "var",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Outer => "outer",
            Op::Transpose => "transpose",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Softmax => "softmax",
            Op::LogSumExp => "logsumexp",
            Op::Sum => "sum",
            Op::SumLast => "sum_last",
            Op::BroadcastLast(_) => "broadcast_last",
            Op::Fill(_) => "fill",
            Op::MinScalar => "min_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// A recorded computation. Confined to one thread; detached [`Tensor`]
/// values may move freely between threads.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Scalar value of a numel-1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.entries.len()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.entries[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Var => true,
            Op::Const => false,
            _ => inputs.iter().any(|i| self.entries[i.0].requires_grad),
        };
        let id = NodeId(self.entries.len());
        self.entries.push(Entry {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(id)
    }

    // ----- leaves -----

    /// Differentiable leaf. Panics on non-finite input: leaves are caller
    /// data, not computed values.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        assert!(value.is_finite(), "var holds non-finite values");
        self.push(Op::Var, vec![], value).expect("finite var")
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        assert!(value.is_finite(), "constant holds non-finite values");
        self.push(Op::Const, vec![], value).expect("finite const")
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ----- elementwise binary (scalar-vs-tensor broadcast only) -----

    fn binary_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", sa, sb),
            })
        }
    }

    fn elementwise_binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        let shape = self.binary_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        };
        self.push(op, vec![a, b], Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise_binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise_binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise_binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, c: f64, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| c * x).collect());
        self.push(Op::ScalarMul(c), vec![a], value)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.scalar_mul(-1.0, a)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let out = &mut data[i * n..(i + 1) * n];
            for (p, &apk) in row.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bpn) in out.iter_mut().zip(brow) {
                    *o += apk * bpn;
                }
            }
        }
        self.push(Op::MatMul, vec![a, b], Tensor::matrix(m, n, data))
    }

    /// Matrix-vector product: `[m,k] * [k] -> [m]`.
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tx) = (self.value(a), self.value(x));
        let (sa, sx) = (ta.shape(), tx.shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                details: format!("{:?} x {:?}", sa, sx),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (ad, xd) = (ta.data(), tx.data());
        let data: Vec<f64> = (0..m)
            .map(|i| {
                ad[i * k..(i + 1) * k]
                    .iter()
                    .zip(xd)
                    .map(|(&w, &v)| w * v)
                    .sum()
            })
            .collect();
        self.push(Op::MatVec, vec![a, x], Tensor::vector(data))
    }

    /// Outer product of two vectors: `[m] x [k] -> [m,k]`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "outer",
                details: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k) = (ta.numel(), tb.numel());
        let mut data = Vec::with_capacity(m * k);
        for &x in ta.data() {
            for &y in tb.data() {
                data.push(x * y);
            }
        }
        self.push(Op::Outer, vec![a, b], Tensor::matrix(m, k, data))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                details: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose, vec![a], Tensor::matrix(n, m, data))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(op, vec![a], value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Log, a, f64::ln)
    }

    /// `ln(1 + e^x)`, computed without overflow for large `x`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Softplus, a, |x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        })
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(Op::Recip, a, |x| 1.0 / x)
    }

    // ----- last-axis normalizations -----

    /// Softmax along the last axis, max-subtraction stabilized.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols()?;
        if cols == 0 {
            return Err(DiffError::EmptyInput("softmax"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax, vec![a], Tensor::new(shape, data))
    }

    /// Log-sum-exp along the last axis, max-subtraction stabilized.
    /// `[n,k] -> [n,1]`, `[k] -> [1]`.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols()?;
        if cols == 0 {
            return Err(DiffError::EmptyInput("logsumexp"));
        }
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            data.push(m + s.ln());
        }
        let shape = if t.rank() == 2 {
            vec![t.shape()[0], 1]
        } else {
            vec![1]
        };
        self.push(Op::LogSumExp, vec![a], Tensor::new(shape, data))
    }

    // ----- reductions and broadcasts -----

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(DiffError::EmptyInput("mean"));
        }
        let s = self.sum(a)?;
        self.scalar_mul(1.0 / n as f64, s)
    }

    /// Row sums along the last axis, keeping the axis: `[n,k] -> [n,1]`,
    /// `[k] -> [1]`.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols()?;
        let data: Vec<f64> = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let shape = if t.rank() == 2 {
            vec![t.shape()[0], 1]
        } else {
            vec![1]
        };
        self.push(Op::SumLast, vec![a], Tensor::new(shape, data))
    }

    /// Repeat a trailing length-1 axis `k` times: `[n,1] -> [n,k]`,
    /// `[1] -> [k]`.
    pub fn broadcast_last(&mut self, a: NodeId, k: usize) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let ok = matches!(t.shape(), [_, 1] | [1]);
        if !ok || k == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_last",
                details: format!("cannot broadcast {:?} to width {}", t.shape(), k),
            });
        }
        let mut data = Vec::with_capacity(t.numel() * k);
        for &v in t.data() {
            data.extend(std::iter::repeat(v).take(k));
        }
        let shape = if t.rank() == 2 {
            vec![t.shape()[0], k]
        } else {
            vec![k]
        };
        self.push(Op::BroadcastLast(k), vec![a], Tensor::new(shape, data))
    }

    /// Broadcast a numel-1 node to an arbitrary shape.
    pub fn fill(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        if t.numel() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "fill",
                details: format!("source shape {:?} is not a scalar", t.shape()),
            });
        }
        let numel: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), vec![t.data()[0]; numel]);
        self.push(Op::Fill(shape), vec![a], value)
    }

    // ----- scalar comparisons and clipping -----

    /// Minimum of two numel-1 tensors of identical shape. The gradient
    /// follows the smaller input (ties go to the first).
    pub fn min_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != 1 || tb.numel() != 1 || ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "min_scalar",
                details: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let (va, vb) = (ta.data()[0], tb.data()[0]);
        let value = Tensor::new(ta.shape().to_vec(), vec![va.min(vb)]);
        self.push(Op::MinScalar, vec![a, b], value)
    }

    /// Clamp every element to `[lo, hi]`. Gradient passes inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        if !(lo <= hi) {
            return Err(DiffError::ShapeMismatch {
                op: "clamp",
                details: format!("empty interval [{lo}, {hi}]"),
            });
        }
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    // ----- shape manipulation -----

    /// Concatenate rank-1 tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    details: format!("expected rank 1 parts, got {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat, parts.to_vec(), Tensor::vector(data))
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "slice",
                details: format!("[{start}, {start}+{len}) of shape {:?}", t.shape()),
            });
        }
        let data = t.data()[start..start + len].to_vec();
        self.push(Op::Slice { start, len }, vec![a], Tensor::vector(data))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let value = Tensor::new(shape.clone(), t.data().to_vec());
        self.push(Op::Reshape(shape), vec![a], value)
    }

    // ----- composites -----

    /// Dot product of two equal-length vectors, as a rank-0 scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// L2 norm along the last axis: `sqrt(sum_last(x^2))`.
    pub fn norm_last(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sq = self.square(a)?;
        let s = self.sum_last(sq)?;
        self.sqrt(s)
    }

    /// L2 norm over all elements, as a rank-0 scalar.
    pub fn norm_all(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sq = self.square(a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Re-execute every non-leaf entry and verify the stored values are
    /// reproduced bit-exactly.
    pub fn replay_check(&self) -> Result<(), DiffError> {
        let mut scratch = Tape::new();
        for entry in &self.entries {
            let id = match entry.op {
                Op::Var => scratch.var(entry.value.clone()),
                Op::Const => scratch.constant(entry.value.clone()),
                _ => {
                    let ins = &entry.inputs;
                    let op = entry.op.clone();
                    match op {
                        Op::Add => scratch.add(ins[0], ins[1])?,
                        Op::Sub => scratch.sub(ins[0], ins[1])?,
                        Op::Mul => scratch.mul(ins[0], ins[1])?,
                        Op::ScalarMul(c) => scratch.scalar_mul(c, ins[0])?,
                        Op::MatMul => scratch.matmul(ins[0], ins[1])?,
                        Op::MatVec => scratch.matvec(ins[0], ins[1])?,
                        Op::Outer => scratch.outer(ins[0], ins[1])?,
                        Op::Transpose => scratch.transpose(ins[0])?,
                        Op::Sigmoid => scratch.sigmoid(ins[0])?,
                        Op::Tanh => scratch.tanh(ins[0])?,
                        Op::Exp => scratch.exp(ins[0])?,
                        Op::Log => scratch.log(ins[0])?,
                        Op::Softplus => scratch.softplus(ins[0])?,
                        Op::Square => scratch.square(ins[0])?,
                        Op::Sqrt => scratch.sqrt(ins[0])?,
                        Op::Recip => scratch.recip(ins[0])?,
                        Op::Softmax => scratch.softmax(ins[0])?,
                        Op::LogSumExp => scratch.logsumexp(ins[0])?,
                        Op::Sum => scratch.sum(ins[0])?,
                        Op::SumLast => scratch.sum_last(ins[0])?,
                        Op::BroadcastLast(k) => scratch.broadcast_last(ins[0], k)?,
                        Op::Fill(shape) => scratch.fill(ins[0], shape)?,
                        Op::MinScalar => scratch.min_scalar(ins[0], ins[1])?,
                        Op::Clamp { lo, hi } => scratch.clamp(ins[0], lo, hi)?,
                        Op::Concat => scratch.concat(ins)?,
                        Op::Slice { start, len } => scratch.slice(ins[0], start, len)?,
                        Op::Reshape(shape) => scratch.reshape(ins[0], shape)?,
                        Op::Var | Op::Const => unreachable!(),
                    }
                }
            };
            let replayed = scratch.value(id);
            if replayed.shape() != entry.value.shape()
                || replayed
                    .data()
                    .iter()
                    .zip(entry.value.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(DiffError::ReplayMismatch { node: id.0 });
            }
        }
        Ok(())
    }
}
