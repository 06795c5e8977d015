//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes and hand back lightweight [`Var`] handles; [`Tape::backward`]
//! walks the nodes in reverse and returns the gradient of a scalar loss with
//! respect to every leaf that was created with `requires_grad`.
//!
//! Nodes whose inputs are all constants are stored as constants, so a tape
//! built entirely from constants doubles as a plain evaluator.
//!
//! ```
//! use vdgae_tape::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.reduce_sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::TapeError;
use crate::tensor::{gemm, Operand, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_transposed: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, row: usize },
    MulCol { x: usize, col: usize },
    Scale(usize, f64),
    AddScalar(usize),
    RowL2Normalize { x: usize, denom: Vec<f64>, guarded: Vec<bool> },
    RowSoftmax(usize),
    Sigmoid(usize),
    Exp(usize),
    Log { x: usize, eps: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Arc<[usize]> },
    SegmentSum { x: usize, index: Arc<[usize]> },
    ReduceSum(usize),
    ReduceMean(usize),
    SumCols(usize),
    Transpose(usize),
    /// `dlogits` holds the per-entry derivative, filled during the forward pass.
    WeightedBce { logits: usize, dlogits: Tensor, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.idx)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single-threaded gradient tape. Build one per training step.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: true,
            consumed: false,
        }
    }

    /// Enables or disables the per-op non-finite output check (on by default).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Adds a leaf. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable does not belong to this tape");
        &self.nodes[var.idx].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.idx].requires_grad
    }

    fn check(&self, vars: &[Var]) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        if vars.iter().any(|v| v.tape != self.id || v.idx >= self.nodes.len()) {
            return Err(TapeError::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, TapeError> {
        if self.check_finite && !value.is_finite() {
            return Err(TapeError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.idx].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        let value = self.val(a).matmul(self.val(b))?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                b_transposed: false,
            },
            &[a.idx, b.idx],
        )
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols() != tb.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut value = Tensor::zeros(ta.rows(), tb.rows());
        gemm(Operand::plain(ta), Operand::trans(tb), &mut value, false);
        self.push(
            "matmul_nt",
            value,
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                b_transposed: true,
            },
            &[a.idx, b.idx],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a.idx, b.idx), &[a.idx, b.idx])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a.idx, b.idx), &[a.idx, b.idx])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(&[a, b])?;
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a.idx, b.idx), &[a.idx, b.idx])
    }

    /// `x + 1 * row`, broadcasting a `1 x c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TapeError> {
        self.check(&[x, row])?;
        let (tx, tr) = (self.val(x), self.val(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_row",
                left: tx.shape(),
                right: tr.shape(),
            });
        }
        let mut value = tx.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        self.push(
            "add_row",
            value,
            Op::AddRow {
                x: x.idx,
                row: row.idx,
            },
            &[x.idx, row.idx],
        )
    }

    /// Scales row `i` of `x` by `col[i]` for an `n x 1` column `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, TapeError> {
        self.check(&[x, col])?;
        let (tx, tc) = (self.val(x), self.val(col));
        if tc.cols() != 1 || tc.rows() != tx.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "mul_col",
                left: tx.shape(),
                right: tc.shape(),
            });
        }
        let mut value = tx.clone();
        for i in 0..value.rows() {
            let s = tc.data()[i];
            value.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.push(
            "mul_col",
            value,
            Op::MulCol {
                x: x.idx,
                col: col.idx,
            },
            &[x.idx, col.idx],
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x.idx, factor), &[x.idx])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TapeError> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).map(|v| v + shift);
        self.push("add_scalar", value, Op::AddScalar(x.idx), &[x.idx])
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TapeError> {
        self.mul(x, x)
    }

    /// Divides each row by `max(||row||_2, eps)`.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, TapeError> {
        self.check(&[x])?;
        if eps <= 0.0 {
            return Err(TapeError::InvalidArgument {
                op: "row_l2_normalize",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let tx = self.val(x);
        let mut value = tx.clone();
        let mut denom = Vec::with_capacity(tx.rows());
        let mut guarded = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            let norm = tx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            denom.push(d);
            guarded.push(norm <= eps);
            value.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        self.push(
            "row_l2_normalize",
            value,
            Op::RowL2Normalize {
                x: x.idx,
                denom,
                guarded,
            },
            &[x.idx],
        )
    }

    /// Rows of `x` whose norm does not exceed `eps` (these stay near zero after
    /// [`Tape::row_l2_normalize`]).
    pub fn count_guarded_rows(&self, x: Var, eps: f64) -> usize {
        let tx = self.val(x);
        (0..tx.rows())
            .filter(|&i| tx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() <= eps)
            .count()
    }

    /// Numerically stable softmax along each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let mut value = self.val(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push("row_softmax", value, Op::RowSoftmax(x.idx), &[x.idx])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x.idx), &[x.idx])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).map(f64::exp);
        self.push("exp", value, Op::Exp(x.idx), &[x.idx])
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, x: Var, eps: f64) -> Result<Var, TapeError> {
        self.check(&[x])?;
        if eps <= 0.0 {
            return Err(TapeError::InvalidArgument {
                op: "log",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let value = self.val(x).map(|v| v.max(eps).ln());
        self.push("log", value, Op::Log { x: x.idx, eps }, &[x.idx])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TapeError> {
        self.check(&[x])?;
        if lo > hi {
            return Err(TapeError::InvalidArgument {
                op: "clamp",
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        let value = self.val(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp { x: x.idx, lo, hi }, &[x.idx])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        self.check(parts)?;
        let Some(first) = parts.first() else {
            return Err(TapeError::InvalidArgument {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        };
        let rows = self.val(*first).rows();
        for p in parts {
            if self.val(*p).rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(*first).shape(),
                    right: self.val(*p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(i));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        self.push("concat_cols", value, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let tx = self.val(x);
        if start + len > tx.cols() {
            return Err(TapeError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} exceed width {}", start + len, tx.cols()),
            });
        }
        let value = tx.slice_cols(start, len);
        self.push("slice_cols", value, Op::SliceCols { x: x.idx, start }, &[x.idx])
    }

    /// Row `i` of the result is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let tx = self.val(x);
        let mut data = Vec::with_capacity(index.len() * tx.cols());
        for &r in index.iter() {
            if r >= tx.rows() {
                return Err(TapeError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: tx.rows(),
                });
            }
            data.extend_from_slice(tx.row(r));
        }
        let value = Tensor::from_vec(index.len(), tx.cols(), data)?;
        self.push("gather_rows", value, Op::GatherRows { x: x.idx, index }, &[x.idx])
    }

    /// Sums row `i` of `x` into row `index[i]` of an `num_segments x cols` result.
    pub fn segment_sum(&mut self, x: Var, index: Arc<[usize]>, num_segments: usize) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let tx = self.val(x);
        if index.len() != tx.rows() {
            return Err(TapeError::InvalidArgument {
                op: "segment_sum",
                reason: format!("{} indices for {} rows", index.len(), tx.rows()),
            });
        }
        let mut value = Tensor::zeros(num_segments, tx.cols());
        for (i, &s) in index.iter().enumerate() {
            if s >= num_segments {
                return Err(TapeError::IndexOutOfRange {
                    op: "segment_sum",
                    index: s,
                    len: num_segments,
                });
            }
            for (o, v) in value.row_mut(s).iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        self.push("segment_sum", value, Op::SegmentSum { x: x.idx, index }, &[x.idx])
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = Tensor::scalar(self.val(x).data().iter().sum());
        self.push("reduce_sum", value, Op::ReduceSum(x.idx), &[x.idx])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let tx = self.val(x);
        if tx.is_empty() {
            return Err(TapeError::InvalidArgument {
                op: "reduce_mean",
                reason: "empty tensor".into(),
            });
        }
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64);
        self.push("reduce_mean", value, Op::ReduceMean(x.idx), &[x.idx])
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let tx = self.val(x);
        let data = (0..tx.rows()).map(|i| tx.row(i).iter().sum()).collect();
        let value = Tensor::from_vec(tx.rows(), 1, data)?;
        self.push("sum_cols", value, Op::SumCols(x.idx), &[x.idx])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).transpose();
        self.push("transpose", value, Op::Transpose(x.idx), &[x.idx])
    }

    /// A constant copy of `x`; no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(&[x])?;
        let value = self.val(x).clone();
        Ok(self.constant(value))
    }

    /// Weighted binary cross-entropy on logits, averaged over all entries and
    /// multiplied by `scale`:
    ///
    /// `scale / n * sum(pos_weight * y * softplus(-x) + (1 - y) * softplus(x))`
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        targets: Arc<Tensor>,
        pos_weight: f64,
        scale: f64,
    ) -> Result<Var, TapeError> {
        self.check(&[logits])?;
        let tx = self.val(logits);
        if tx.shape() != targets.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "weighted_bce_with_logits",
                left: tx.shape(),
                right: targets.shape(),
            });
        }
        if tx.is_empty() {
            return Err(TapeError::InvalidArgument {
                op: "weighted_bce_with_logits",
                reason: "empty logits".into(),
            });
        }
        // one exp and one ln_1p per entry give both the loss and its slope:
        // softplus(-x) = softplus(x) - x and sigmoid(-x) = 1 - sigmoid(x)
        let mut dlogits = Tensor::zeros(tx.rows(), tx.cols());
        let mut total = 0.0;
        for ((d, &x), &y) in dlogits.data_mut().iter_mut().zip(tx.data()).zip(targets.data()) {
            let e = (-x.abs()).exp();
            let sp = x.max(0.0) + e.ln_1p();
            let p = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            total += pos_weight * y * (sp - x) + (1.0 - y) * sp;
            *d = -pos_weight * y * (1.0 - p) + (1.0 - y) * p;
        }
        let value = Tensor::scalar(scale * total / tx.len() as f64);
        self.push(
            "weighted_bce_with_logits",
            value,
            Op::WeightedBce {
                logits: logits.idx,
                dlogits,
                scale,
            },
            &[logits.idx],
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: later calls to
    /// `backward` or to any op fail with [`TapeError::Consumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TapeError> {
        self.check(&[loss])?;
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(TapeError::NotScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        if self.nodes[loss.idx].requires_grad {
            grads[loss.idx] = Some(Tensor::scalar(1.0));
        }
        let mut out = HashMap::new();
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out.insert(i, g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(i)
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut Tensor)| {
            if !nodes[idx].requires_grad {
                return;
            }
            let slot = grads[idx].get_or_insert_with(|| {
                let v = &nodes[idx].value;
                Tensor::zeros(v.rows(), v.cols())
            });
            f(slot);
        };
        let add_scaled = |dst: &mut Tensor, src: &Tensor, s: f64| {
            for (d, v) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += s * v;
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                if *b_transposed {
                    // C = A B^T: dA = G B, dB = G^T A
                    acc(*a, &mut |d| gemm(Operand::plain(g), Operand::plain(tb), d, true));
                    acc(*b, &mut |d| gemm(Operand::trans(g), Operand::plain(ta), d, true));
                } else {
                    // C = A B: dA = G B^T, dB = A^T G
                    acc(*a, &mut |d| gemm(Operand::plain(g), Operand::trans(tb), d, true));
                    acc(*b, &mut |d| gemm(Operand::trans(ta), Operand::plain(g), d, true));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_scaled(d, g, 1.0));
                acc(*b, &mut |d| add_scaled(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_scaled(d, g, 1.0));
                acc(*b, &mut |d| add_scaled(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |d| {
                    for ((d, gv), bv) in d.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gv), av) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddRow { x, row } => {
                acc(*x, &mut |d| add_scaled(d, g, 1.0));
                acc(*row, &mut |d| {
                    for r in 0..g.rows() {
                        for (dv, gv) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::MulCol { x, col } => {
                let (tx, tc) = (&nodes[*x].value, &nodes[*col].value);
                acc(*x, &mut |d| {
                    for r in 0..g.rows() {
                        let s = tc.data()[r];
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                            *dv += s * gv;
                        }
                    }
                });
                acc(*col, &mut |d| {
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum();
                        d.data_mut()[r] += dot;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| add_scaled(d, g, *s)),
            Op::AddScalar(x) => acc(*x, &mut |d| add_scaled(d, g, 1.0)),
            Op::RowL2Normalize { x, denom, guarded } => {
                acc(*x, &mut |d| {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let s = denom[r];
                        if guarded[r] {
                            for (dv, gv) in d.row_mut(r).iter_mut().zip(gr) {
                                *dv += gv / s;
                            }
                        } else {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((dv, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *dv += (gv - yv * dot) / s;
                            }
                        }
                    }
                });
            }
            Op::RowSoftmax(x) => {
                acc(*x, &mut |d| {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((dv, gv), yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *dv += gv * yv * (1.0 - yv);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((dv, gv), yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *dv += gv * yv;
                }
            }),
            Op::Log { x, eps } => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |d| {
                    for ((dv, gv), xv) in d.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xv > *eps {
                            *dv += gv / xv;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |d| {
                    for ((dv, gv), xv) in d.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        if *xv >= *lo && *xv <= *hi {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = nodes[p].value.cols();
                    acc(p, &mut |d| {
                        for r in 0..g.rows() {
                            for (dv, gv) in d.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + width]) {
                                *dv += gv;
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::SliceCols { x, start } => {
                let width = g.cols();
                acc(*x, &mut |d| {
                    for r in 0..g.rows() {
                        for (dv, gv) in d.row_mut(r)[*start..*start + width].iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => acc(*x, &mut |d| {
                for (r, &src) in index.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
            }),
            Op::SegmentSum { x, index } => acc(*x, &mut |d| {
                for (r, &seg) in index.iter().enumerate() {
                    for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(seg)) {
                        *dv += gv;
                    }
                }
            }),
            Op::ReduceSum(x) => {
                let s = g.data()[0];
                acc(*x, &mut |d| d.data_mut().iter_mut().for_each(|v| *v += s));
            }
            Op::ReduceMean(x) => {
                let n = nodes[*x].value.len() as f64;
                let s = g.data()[0] / n;
                acc(*x, &mut |d| d.data_mut().iter_mut().for_each(|v| *v += s));
            }
            Op::SumCols(x) => acc(*x, &mut |d| {
                for r in 0..d.rows() {
                    let s = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v += s);
                }
            }),
            Op::Transpose(x) => acc(*x, &mut |d| {
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = d.get(c, r) + g.get(r, c);
                        d.set(c, r, v);
                    }
                }
            }),
            Op::WeightedBce { logits, dlogits, scale } => {
                let s = g.data()[0] * scale / dlogits.len() as f64;
                acc(*logits, &mut |d| add_scaled(d, dlogits, s));
            }
        }
    }
}
