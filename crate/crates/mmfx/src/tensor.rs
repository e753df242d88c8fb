//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc`) onto a flat `f64` buffer
//! plus a shape. Results of operations keep a record of their parents and
//! enough saved context to run the chain rule backwards; [`Tensor::backward`]
//! walks that graph in reverse topological order and accumulates gradients
//! additively into every reachable tensor that has `requires_grad` set.
//!
//! Conventions:
//! - Row-major storage, always contiguous. Matrices are `[rows, cols]`.
//! - Math runs in `f64`; only checkpoints narrow to `f32`.
//! - Graph construction and backward are single-threaded per model. Handles
//!   are intentionally `!Send`; cross-thread work passes raw buffers instead.
//! - Shape mismatches are programmer errors and panic with messages naming
//!   the offending shapes, like slice indexing would.
//! - Gradients accumulate across backward calls; callers zero them between
//!   optimization steps (see `zero_grad` / the optimizer, which does this).

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::rng::Rng;

/// Reverse-mode operation record: which inputs produced a tensor and what
/// extra context the backward rule needs.
enum Op {
    MatMul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    /// Row-broadcast add: `[s, d] + [d]`.
    AddRow { x: Tensor, row: Tensor },
    /// Elementwise `scale * x + shift`.
    Affine { x: Tensor, scale: f64 },
    SoftmaxLast { x: Tensor },
    RmsNorm { x: Tensor, gain: Tensor, eps: f64 },
    Silu { x: Tensor },
    Sigmoid { x: Tensor },
    Tanh { x: Tensor },
    Ln { x: Tensor },
    Clamp { x: Tensor, lo: f64, hi: f64 },
    /// Mask already folded with the keep-scale: entries are 0 or 1/(1-rate).
    Dropout { x: Tensor, mask: Vec<f64> },
    GatherRows { table: Tensor, ids: Vec<usize> },
    NarrowCols { x: Tensor, start: usize, len: usize },
    ConcatCols { parts: Vec<Tensor> },
    StackRows { parts: Vec<Tensor> },
    MeanRows { x: Tensor },
    MeanAll { x: Tensor },
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

/// Shared handle onto a tensor value (and, for op results, its graph node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    /// Plain value tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "shape {:?} wants {} elements, data has {}",
            shape,
            numel_of(shape),
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                op: None,
            }),
        }
    }

    /// Trainable leaf: participates in backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::new(shape, data);
        t.inner.requires_grad.set(true);
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape, vec![value; numel_of(shape)])
    }

    /// Trainable leaf with i.i.d. Gaussian entries.
    pub fn param_gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.next_gaussian() * std).collect();
        Tensor::param(shape, data)
    }

    fn node(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        // Only record the graph when some input can use a gradient; pure
        // value computations stay leaf tensors.
        let needs = op_parents(&op).iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(needs),
                op: if needs { Some(op) } else { None },
            }),
        }
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics unless the tensor holds exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip gradient tracking on a leaf (used to freeze base weights).
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    /// Drop the gradient buffer entirely.
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Same underlying allocation?
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn rows_cols(&self) -> (usize, usize) {
        assert_eq!(self.shape().len(), 2, "expected a matrix, got shape {:?}", self.shape());
        (self.inner.shape[0], self.inner.shape[1])
    }

    /// Width of the trailing dimension.
    fn last_dim(&self) -> usize {
        *self.shape().last().expect("rank-0 tensor has no trailing dimension")
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// Matrix product `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        assert_eq!(
            k, k2,
            "matmul inner dimensions disagree: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Tensor::node(vec![m, n], out, Op::MatMul { a: self.clone(), b: other.clone() })
    }

    /// Matrix transpose.
    pub fn t(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Tensor::node(vec![c, r], out, Op::Transpose { x: self.clone() })
    }

    fn assert_same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what} needs matching shapes: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Add { a: self.clone(), b: other.clone() })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Sub { a: self.clone(), b: other.clone() })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Mul { a: self.clone(), b: other.clone() })
    }

    /// Broadcast a rank-1 row across every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let (s, d) = self.rows_cols();
        assert_eq!(
            row.shape(),
            &[d],
            "add_row width mismatch: {:?} vs {:?}",
            self.shape(),
            row.shape()
        );
        let x = self.data();
        let r = row.data();
        let mut out = Vec::with_capacity(s * d);
        for i in 0..s {
            for j in 0..d {
                out.push(x[i * d + j] + r[j]);
            }
        }
        drop(x);
        drop(r);
        Tensor::node(vec![s, d], out, Op::AddRow { x: self.clone(), row: row.clone() })
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let out = self.data().iter().map(|v| scale * v + shift).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Affine { x: self.clone(), scale })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.affine(factor, 0.0)
    }

    /// Softmax over the trailing dimension, computed with max subtraction so
    /// large logits cannot overflow.
    pub fn softmax_last(&self) -> Tensor {
        let d = self.last_dim();
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        drop(x);
        Tensor::node(self.shape().to_vec(), out, Op::SoftmaxLast { x: self.clone() })
    }

    /// Root-mean-square normalization of each trailing-dimension row with a
    /// learnable per-channel gain: `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Tensor {
        let d = self.last_dim();
        assert_eq!(
            gain.shape(),
            &[d],
            "rms_norm gain width mismatch: {:?} vs {:?}",
            self.shape(),
            gain.shape()
        );
        let x = self.data();
        let g = gain.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (mean_sq + eps).sqrt();
            out.extend(row.iter().zip(g.iter()).map(|(v, gi)| gi * v * inv));
        }
        drop(x);
        drop(g);
        Tensor::node(
            self.shape().to_vec(),
            out,
            Op::RmsNorm { x: self.clone(), gain: gain.clone(), eps },
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Silu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Sigmoid { x: self.clone() })
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v.tanh()).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Tanh { x: self.clone() })
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v.ln()).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Ln { x: self.clone() })
    }

    /// Clamp into `[lo, hi]`. Gradient passes through inside the interval
    /// (boundaries included) and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp bounds reversed: [{lo}, {hi}]");
        let out = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Clamp { x: self.clone(), lo, hi })
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`, so the expectation is
    /// unchanged. In eval mode (or at rate 0) this is the identity and draws
    /// nothing from the generator.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        if !training || rate == 0.0 {
            return self.clone();
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        let out = self.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        Tensor::node(self.shape().to_vec(), out, Op::Dropout { x: self.clone(), mask })
    }

    /// Copy of the value cut loose from the graph: no gradient flows through.
    pub fn detach(&self) -> Tensor {
        Tensor::new(&self.inner.shape, self.to_vec())
    }

    /// Select rows of a `[rows, d]` table by index, duplicates allowed.
    /// Gradient scatter-adds back into the table rows.
    pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
        let (rows, d) = table.rows_cols();
        for &id in ids {
            assert!(id < rows, "row id {id} out of range for table with {rows} rows");
        }
        let t = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        drop(t);
        Tensor::node(
            vec![ids.len(), d],
            out,
            Op::GatherRows { table: table.clone(), ids: ids.to_vec() },
        )
    }

    /// Column slice `[s, d] -> [s, len]` starting at `start`.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor {
        let (s, d) = self.rows_cols();
        assert!(
            start + len <= d,
            "column range {start}..{} exceeds width of shape {:?}",
            start + len,
            self.shape()
        );
        let x = self.data();
        let mut out = Vec::with_capacity(s * len);
        for i in 0..s {
            out.extend_from_slice(&x[i * d + start..i * d + start + len]);
        }
        drop(x);
        Tensor::node(vec![s, len], out, Op::NarrowCols { x: self.clone(), start, len })
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let s = parts[0].rows_cols().0;
        let mut width = 0;
        for p in parts {
            let (rows, cols) = p.rows_cols();
            assert_eq!(rows, s, "concat_cols row counts disagree: {rows} vs {s}");
            width += cols;
        }
        let mut out = Vec::with_capacity(s * width);
        for i in 0..s {
            for p in parts {
                let (_, cols) = p.rows_cols();
                let d = p.data();
                out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
            }
        }
        Tensor::node(vec![s, width], out, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Stack single-row matrices `[1, c]` into `[n, c]`.
    pub fn stack_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let c = parts[0].rows_cols().1;
        let mut out = Vec::with_capacity(parts.len() * c);
        for p in parts {
            let (rows, cols) = p.rows_cols();
            assert_eq!((rows, cols), (1, c), "stack_rows wants [1, {c}] parts, got {:?}", p.shape());
            out.extend_from_slice(&p.data());
        }
        Tensor::node(vec![parts.len(), c], out, Op::StackRows { parts: parts.to_vec() })
    }

    /// Mean over rows: `[s, d] -> [1, d]`.
    pub fn mean_rows(&self) -> Tensor {
        let (s, d) = self.rows_cols();
        assert!(s > 0, "mean_rows of an empty matrix");
        let x = self.data();
        let mut out = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= s as f64;
        }
        drop(x);
        Tensor::node(vec![1, d], out, Op::MeanRows { x: self.clone() })
    }

    /// Mean over every element, producing a rank-0 scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        assert!(n > 0, "mean_all of an empty tensor");
        let sum: f64 = self.data().iter().sum();
        Tensor::node(vec![], vec![sum / n as f64], Op::MeanAll { x: self.clone() })
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Seeds the loss gradient with 1
    /// and accumulates (additively) into the gradient buffer of every tensor
    /// reachable through the graph that has `requires_grad` set.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward needs a scalar loss, got shape {:?}", self.shape());
        // Postorder collection (iterative, keyed by allocation identity) so
        // each node is processed after everything that consumed it.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                stack.push((t.clone(), true));
                for p in op_parents(op) {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            } else {
                order.push(t);
            }
        }

        // Interior nodes belong to this sweep alone: reset their buffers so a
        // second backward contributes exactly one more pass. Leaves keep what
        // they have — accumulation across calls is their contract.
        for t in &order {
            if t.inner.op.is_some() {
                t.clear_grad();
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(op) = &t.inner.op else { continue };
            let g = t.grad().expect("node reached in reverse order must carry a gradient");
            backward_op(op, &g);
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    // Split on sign so the exponential never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            vec![a, b]
        }
        Op::AddRow { x, row } => vec![x, row],
        Op::RmsNorm { x, gain, .. } => vec![x, gain],
        Op::Transpose { x }
        | Op::Affine { x, .. }
        | Op::SoftmaxLast { x }
        | Op::Silu { x }
        | Op::Sigmoid { x }
        | Op::Tanh { x }
        | Op::Ln { x }
        | Op::Clamp { x, .. }
        | Op::Dropout { x, .. }
        | Op::NarrowCols { x, .. }
        | Op::MeanRows { x }
        | Op::MeanAll { x } => vec![x],
        Op::GatherRows { table, .. } => vec![table],
        Op::ConcatCols { parts } | Op::StackRows { parts } => parts.iter().collect(),
    }
}

/// Chain-rule step for one node: `g` is the gradient of the loss with respect
/// to the node's output; contributions are accumulated into each parent that
/// tracks gradients.
fn backward_op(op: &Op, g: &[f64]) {
    match op {
        Op::MatMul { a, b } => {
            let (m, k) = a.rows_cols();
            let (_, n) = b.rows_cols();
            if a.requires_grad() {
                // dA = G · B^T
                let bd = b.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = A^T · G
                let ad = a.data();
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let apy = ad[i * k + p];
                        if apy == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += apy * g[i * n + j];
                        }
                    }
                }
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::Transpose { x } => {
            if x.requires_grad() {
                let (r, c) = x.rows_cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::Add { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        }
        Op::Sub { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, bi)| gi * bi).collect();
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).collect();
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::AddRow { x, row } => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if row.requires_grad() {
                let d = row.numel();
                let mut dr = vec![0.0; d];
                for chunk in g.chunks_exact(d) {
                    for (o, v) in dr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                row.accumulate_grad(&dr);
            }
        }
        Op::Affine { x, scale } => {
            if x.requires_grad() {
                let dx: Vec<f64> = g.iter().map(|v| scale * v).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::SoftmaxLast { x } => {
            if x.requires_grad() {
                let d = x.last_dim();
                // Recompute the forward output row by row; dx_i = y_i (g_i - g·y).
                let xd = x.data();
                let mut dx = Vec::with_capacity(xd.len());
                for (row, grow) in xd.chunks_exact(d).zip(g.chunks_exact(d)) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let y: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                    let dot: f64 = grow.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    dx.extend(y.iter().zip(grow.iter()).map(|(yi, gi)| yi * (gi - dot)));
                }
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::RmsNorm { x, gain, eps } => {
            let d = x.last_dim();
            let xd = x.data();
            let gd = gain.data();
            let mut dx = if x.requires_grad() { vec![0.0; xd.len()] } else { Vec::new() };
            let mut dg = if gain.requires_grad() { vec![0.0; d] } else { Vec::new() };
            for (r, (row, grow)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let rms = (mean_sq + eps).sqrt();
                if x.requires_grad() {
                    // y_i = g_i x_i / rms;
                    // dx_j = gain_j G_j / rms - x_j/(d rms^3) * sum_i(G_i gain_i x_i)
                    let weighted: f64 = grow
                        .iter()
                        .zip(gd.iter())
                        .zip(row.iter())
                        .map(|((gi, gn), xi)| gi * gn * xi)
                        .sum();
                    let base = r * d;
                    for j in 0..d {
                        dx[base + j] = gd[j] * grow[j] / rms
                            - row[j] * weighted / (d as f64 * rms * rms * rms);
                    }
                }
                if gain.requires_grad() {
                    for j in 0..d {
                        dg[j] += grow[j] * row[j] / rms;
                    }
                }
            }
            drop(xd);
            drop(gd);
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gain.requires_grad() {
                gain.accumulate_grad(&dg);
            }
        }
        Op::Silu { x } => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gi, &v)| {
                        let s = sigmoid_scalar(v);
                        gi * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Sigmoid { x } => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gi, &v)| {
                        let s = sigmoid_scalar(v);
                        gi * s * (1.0 - s)
                    })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Tanh { x } => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gi, &v)| {
                        let t = v.tanh();
                        gi * (1.0 - t * t)
                    })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Ln { x } => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<f64> = g.iter().zip(xd.iter()).map(|(gi, v)| gi / v).collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if x.requires_grad() {
                let xd = x.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(gi, v)| if *v >= *lo && *v <= *hi { *gi } else { 0.0 })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        Op::Dropout { x, mask } => {
            if x.requires_grad() {
                let dx: Vec<f64> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::GatherRows { table, ids } => {
            if table.requires_grad() {
                let (rows, d) = table.rows_cols();
                let mut dt = vec![0.0; rows * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[pos * d + j];
                    }
                }
                table.accumulate_grad(&dt);
            }
        }
        Op::NarrowCols { x, start, len } => {
            if x.requires_grad() {
                let (s, d) = x.rows_cols();
                let mut dx = vec![0.0; s * d];
                for i in 0..s {
                    for j in 0..*len {
                        dx[i * d + start + j] = g[i * len + j];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::ConcatCols { parts } => {
            let s = parts[0].rows_cols().0;
            let total: usize = parts.iter().map(|p| p.rows_cols().1).sum();
            let mut offset = 0;
            for p in parts {
                let (_, cols) = p.rows_cols();
                if p.requires_grad() {
                    let mut dp = Vec::with_capacity(s * cols);
                    for i in 0..s {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + cols]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += cols;
            }
        }
        Op::StackRows { parts } => {
            let c = parts[0].rows_cols().1;
            for (i, p) in parts.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(&g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::MeanRows { x } => {
            if x.requires_grad() {
                let (s, d) = x.rows_cols();
                let mut dx = Vec::with_capacity(s * d);
                for _ in 0..s {
                    dx.extend(g.iter().map(|v| v / s as f64));
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::MeanAll { x } => {
            if x.requires_grad() {
                let n = x.numel();
                let dx = vec![g[0] / n as f64; n];
                x.accumulate_grad(&dx);
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

// ----------------------------------------------------------------------
// Gradient checking
// ----------------------------------------------------------------------

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Worst relative error observed.
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely (at the floor's scale) instead of
/// blowing up the ratio.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const REL_ERR_FLOOR: f64 = 1e-4;

/// Compare reverse-mode gradients of `loss_fn` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element, for every
/// tensor in `against`. `loss_fn` must read the live tensor values so the
/// perturbations are visible to it, and must return a scalar.
pub fn grad_check_many(
    loss_fn: impl Fn() -> Tensor,
    against: &[Tensor],
    step: f64,
    tol: f64,
) -> GradCheckReport {
    for t in against {
        assert!(t.requires_grad(), "grad check target must have requires_grad set");
        t.clear_grad();
    }
    let loss = loss_fn();
    loss.backward();
    // A target the loss never touches legitimately has a zero gradient.
    let analytic: Vec<Vec<f64>> =
        against.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    for (t, grad) in against.iter().zip(analytic.iter()) {
        for i in 0..t.numel() {
            let original = t.data()[i];
            t.data_mut()[i] = original + step;
            let up = loss_fn().item();
            t.data_mut()[i] = original - step;
            let down = loss_fn().item();
            t.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            max_rel_err = max_rel_err.max(rel_err(grad[i], numeric, REL_ERR_FLOOR));
            checked += 1;
        }
    }
    for t in against {
        t.clear_grad();
    }
    GradCheckReport { checked, max_rel_err, pass: max_rel_err < tol }
}

/// Single-tensor convenience wrapper around [`grad_check_many`].
pub fn grad_check(
    loss_fn: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    step: f64,
    tol: f64,
) -> GradCheckReport {
    grad_check_many(|| loss_fn(x), std::slice::from_ref(x), step, tol)
}
