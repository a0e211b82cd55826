//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! All values live on a [`Tape`]; operations record enough state to replay
//! their backward rules in reverse order. The tape is generic over the
//! element type so the same forward code can run in f32 (the lab's working
//! precision) and f64 (for finite-difference verification).

use crate::error::{Error, Result};

/// Element type for tape arithmetic.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {
    /// Lossy conversion from f64 for constants.
    fn c(v: f64) -> Self {
        Self::from(v).expect("constant conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast::<Self, f64>(self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Layer-norm variance regularizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Denominator floor for L2 normalization and cosine similarity.
pub const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(pub(crate) usize);

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

#[derive(Debug)]
enum Op<T> {
    Add { a: Id, b: Id, out: Id },
    AddRow { a: Id, row: Id, out: Id, cols: usize },
    Mul { a: Id, b: Id, out: Id },
    ScalarMul { a: Id, c: T, out: Id },
    Matmul { a: Id, b: Id, out: Id, m: usize, k: usize, n: usize },
    MatmulNt { a: Id, b: Id, out: Id, m: usize, k: usize, n: usize },
    Clamp { a: Id, lo: T, hi: T, out: Id },
    Gelu { a: Id, out: Id },
    SoftmaxLast { a: Id, out: Id, cols: usize },
    LayerNormLast { a: Id, gamma: Id, beta: Id, out: Id, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    L2NormalizeLast { a: Id, out: Id, cols: usize, denoms: Vec<T> },
    GatherRows { a: Id, idx: Vec<usize>, out: Id, cols: usize },
    PickPerRow { a: Id, idx: Vec<usize>, out: Id, cols: usize },
    Mean { a: Id, out: Id },
    Log { a: Id, out: Id },
    ConcatRows { parts: Vec<Id>, out: Id, cols: usize },
    SliceCols { a: Id, start: usize, len: usize, out: Id, cols: usize },
    ExtractPatches { a: Id, out: Id, c: usize, h: usize, w: usize, p: usize },
}

/// Ordered record of primitive operations plus the tensors they touch.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    strict: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), strict: false }
    }

    /// In strict mode every leaf and op output is scanned for non-finite values.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Id> {
        if shape.iter().any(|&d| d == 0) || numel(shape) != data.len() {
            return Err(Error::ShapeMismatch { op: "leaf", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        if self.strict && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { shape: shape.to_vec(), data, grad: None, requires_grad });
        Ok(Id(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Id> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: T) -> Id {
        self.leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: Id) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: Id) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: Id) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn item(&self, id: Id) -> T {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].data[0]
    }

    fn push_out(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<T>, requires: bool) -> Result<Id> {
        if self.strict && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.into()));
        }
        self.nodes.push(Node { shape, data, grad: None, requires_grad: requires });
        Ok(Id(self.nodes.len() - 1))
    }

    fn record(&mut self, op: Op<T>, any_requires: bool) {
        if any_requires {
            self.ops.push(op);
        }
    }

    fn rows_cols(&self, id: Id) -> (usize, usize) {
        let s = self.shape(id);
        let cols = *s.last().unwrap();
        (numel(s) / cols, cols)
    }

    // ---- primitives -------------------------------------------------------

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch { op: "add", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_out("add", self.shape(a).to_vec(), data, req)?;
        self.record(Op::Add { a, b, out }, req);
        Ok(out)
    }

    /// Broadcast add of a length-n row vector onto every row of an m×n matrix.
    pub fn add_row(&mut self, a: Id, row: Id) -> Result<Id> {
        let (_, cols) = self.rows_cols(a);
        if numel(self.shape(row)) != cols {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: self.shape(a).to_vec(), rhs: self.shape(row).to_vec() });
        }
        let rv = self.data(row).to_vec();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % cols])
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(row);
        let out = self.push_out("add_row", self.shape(a).to_vec(), data, req)?;
        self.record(Op::AddRow { a, row, out, cols }, req);
        Ok(out)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch { op: "mul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_out("mul", self.shape(a).to_vec(), data, req)?;
        self.record(Op::Mul { a, b, out }, req);
        Ok(out)
    }

    pub fn scalar_mul(&mut self, a: Id, c: T) -> Result<Id> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let req = self.requires_grad(a);
        let out = self.push_out("scalar_mul", self.shape(a).to_vec(), data, req)?;
        self.record(Op::ScalarMul { a, c, out }, req);
        Ok(out)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        let nb = self.scalar_mul(b, T::c(-1.0))?;
        self.add(a, nb)
    }

    /// A[m×k] · B[k×n].
    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if k != kb {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut data = vec![T::zero(); m * n];
        mm_nn(&mut data, self.data(a), self.data(b), m, k, n);
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_out("matmul", vec![m, n], data, req)?;
        self.record(Op::Matmul { a, b, out, m, k, n }, req);
        Ok(out)
    }

    /// A[m×k] · B[n×k]ᵀ.
    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k) = self.rows_cols(a);
        let (n, kb) = self.rows_cols(b);
        if k != kb {
            return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut data = vec![T::zero(); m * n];
        mm_nt(&mut data, self.data(a), self.data(b), m, k, n);
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_out("matmul_nt", vec![m, n], data, req)?;
        self.record(Op::MatmulNt { a, b, out, m, k, n }, req);
        Ok(out)
    }

    pub fn clamp(&mut self, a: Id, lo: T, hi: T) -> Result<Id> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let req = self.requires_grad(a);
        let out = self.push_out("clamp", self.shape(a).to_vec(), data, req)?;
        self.record(Op::Clamp { a, lo, hi, out }, req);
        Ok(out)
    }

    /// Elementwise sign with sign(0) = 0. Gradient is zero everywhere.
    pub fn sign(&mut self, a: Id) -> Result<Id> {
        let data: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        // sign is piecewise constant: never contributes gradient, so no record.
        self.push_out("sign", self.shape(a).to_vec(), data, false)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Id) -> Result<Id> {
        let data: Vec<T> = self.data(a).iter().map(|&x| gelu_val(x)).collect();
        let req = self.requires_grad(a);
        let out = self.push_out("gelu", self.shape(a).to_vec(), data, req)?;
        self.record(Op::Gelu { a, out }, req);
        Ok(out)
    }

    /// Softmax over the last axis, numerically stabilized by max subtraction.
    pub fn softmax_last(&mut self, a: Id) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        let src = self.data(a);
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let mx = x.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..cols {
                let e = (x[j] - mx).exp();
                data[r * cols + j] = e;
                sum = sum + e;
            }
            for j in 0..cols {
                data[r * cols + j] = data[r * cols + j] / sum;
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_out("softmax", self.shape(a).to_vec(), data, req)?;
        self.record(Op::SoftmaxLast { a, out, cols }, req);
        Ok(out)
    }

    /// Layer norm over the last axis with affine parameters gamma, beta (length = last dim).
    pub fn layer_norm_last(&mut self, a: Id, gamma: Id, beta: Id) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        if numel(self.shape(gamma)) != cols || numel(self.shape(beta)) != cols {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: self.shape(a).to_vec(), rhs: self.shape(gamma).to_vec() });
        }
        let eps = T::c(LAYER_NORM_EPS);
        let src = self.data(a);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let cn = T::c(cols as f64);
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let mean = x.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                xhat[r * cols + j] = (x[j] - mean) * rs;
            }
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let data: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| xh * g[i % cols] + b[i % cols])
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(gamma) || self.requires_grad(beta);
        let out = self.push_out("layer_norm", self.shape(a).to_vec(), data, req)?;
        self.record(Op::LayerNormLast { a, gamma, beta, out, cols, xhat, rstd }, req);
        Ok(out)
    }

    /// L2-normalize each row (last axis), denominator floored at 1e-12.
    pub fn l2_normalize_last(&mut self, a: Id) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        let floor = T::c(L2_NORM_FLOOR);
        let src = self.data(a);
        let mut denoms = vec![T::zero(); rows];
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let norm = x.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            let d = norm.max(floor);
            denoms[r] = d;
            for j in 0..cols {
                data[r * cols + j] = x[j] / d;
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_out("l2_normalize", self.shape(a).to_vec(), data, req)?;
        self.record(Op::L2NormalizeLast { a, out, cols, denoms }, req);
        Ok(out)
    }

    /// Pairwise cosine similarity of the rows of a (N×d) and b (M×d) → N×M.
    pub fn cosine_similarity_matrix(&mut self, a: Id, b: Id) -> Result<Id> {
        let na = self.l2_normalize_last(a)?;
        let nb = self.l2_normalize_last(b)?;
        self.matmul_nt(na, nb)
    }

    /// Select rows of a matrix by (possibly repeated) indices.
    pub fn gather_rows(&mut self, a: Id, idx: &[usize]) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let src = self.data(a);
        let mut data = vec![T::zero(); idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            data[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let req = self.requires_grad(a);
        let out = self.push_out("gather_rows", vec![idx.len(), cols], data, req)?;
        self.record(Op::GatherRows { a, idx: idx.to_vec(), out, cols }, req);
        Ok(out)
    }

    /// Pick one element per row: out[i] = a[i, idx[i]].
    pub fn pick_per_row(&mut self, a: Id, idx: &[usize]) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        if idx.len() != rows {
            return Err(Error::ShapeMismatch { op: "pick_per_row", lhs: vec![rows], rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid(format!("pick_per_row: index {bad} out of range for {cols} cols")));
        }
        let src = self.data(a);
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &j)| src[r * cols + j]).collect();
        let req = self.requires_grad(a);
        let out = self.push_out("pick_per_row", vec![rows], data, req)?;
        self.record(Op::PickPerRow { a, idx: idx.to_vec(), out, cols }, req);
        Ok(out)
    }

    /// Mean of all elements → scalar (shape [1]).
    pub fn mean(&mut self, a: Id) -> Result<Id> {
        let n = self.data(a).len();
        let sum = self.data(a).iter().fold(T::zero(), |s, &v| s + v);
        let data = vec![sum / T::c(n as f64)];
        let req = self.requires_grad(a);
        let out = self.push_out("mean", vec![1], data, req)?;
        self.record(Op::Mean { a, out }, req);
        Ok(out)
    }

    pub fn log(&mut self, a: Id) -> Result<Id> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.ln()).collect();
        let req = self.requires_grad(a);
        let out = self.push_out("log", self.shape(a).to_vec(), data, req)?;
        self.record(Op::Log { a, out }, req);
        Ok(out)
    }

    /// Stack 2D parts (equal column count) on top of each other.
    pub fn concat_rows(&mut self, parts: &[Id]) -> Result<Id> {
        let (_, cols) = self.rows_cols(parts[0]);
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: vec![cols], rhs: vec![c] });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let out = self.push_out("concat_rows", vec![total, cols], data, req)?;
        self.record(Op::ConcatRows { parts: parts.to_vec(), out, cols }, req);
        Ok(out)
    }

    /// Column slice [start, start+len) of a 2D matrix.
    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Result<Id> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > cols {
            return Err(Error::invalid(format!("slice_cols: [{start}, {}) out of range for {cols} cols", start + len)));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires_grad(a);
        let out = self.push_out("slice_cols", vec![rows, len], data, req)?;
        self.record(Op::SliceCols { a, start, len, out, cols }, req);
        Ok(out)
    }

    /// Rearrange a flat C×H×W image into a (H/p · W/p) × (C·p·p) patch matrix.
    pub fn extract_patches(&mut self, a: Id, c: usize, h: usize, w: usize, p: usize) -> Result<Id> {
        if numel(self.shape(a)) != c * h * w {
            return Err(Error::ShapeMismatch { op: "extract_patches", lhs: self.shape(a).to_vec(), rhs: vec![c, h, w] });
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!("extract_patches: {h}x{w} not divisible by patch {p}")));
        }
        let (ph, pw) = (h / p, w / p);
        let src = self.data(a);
        let mut data = vec![T::zero(); ph * pw * c * p * p];
        for pr in 0..ph {
            for pc in 0..pw {
                let row = pr * pw + pc;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            data[row * c * p * p + ch * p * p + dy * p + dx] =
                                src[ch * h * w + (pr * p + dy) * w + (pc * p + dx)];
                        }
                    }
                }
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_out("extract_patches", vec![ph * pw, c * p * p], data, req)?;
        self.record(Op::ExtractPatches { a, out, c, h, w, p }, req);
        Ok(out)
    }

    // ---- backward ---------------------------------------------------------

    fn grad_buf(&mut self, id: Id) -> &mut [T] {
        let len = self.nodes[id.0].data.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    fn take_grad(&self, id: Id) -> Option<Vec<T>> {
        self.nodes[id.0].grad.clone()
    }

    /// Populate gradients of every `requires_grad` tensor reachable from `loss`.
    pub fn backward(&mut self, loss: Id) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grad_buf(loss)[0] = T::one();
        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi);
        }
        Ok(())
    }

    fn backward_op(&mut self, oi: usize) {
        // Ops are recorded only when an input requires grad, so every op here
        // may contribute. Output grads may be absent if the output never fed
        // into the loss; those ops are skipped.
        macro_rules! og {
            ($out:expr) => {
                match self.take_grad($out) {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        // Split borrows by cloning small saved vectors out of the op.
        let op = &self.ops[oi];
        match op {
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    accumulate(self.grad_buf(a), &g);
                }
                if self.requires_grad(b) {
                    accumulate(self.grad_buf(b), &g);
                }
            }
            Op::AddRow { a, row, out, cols } => {
                let (a, row, out, cols) = (*a, *row, *out, *cols);
                let g = og!(out);
                if self.requires_grad(a) {
                    accumulate(self.grad_buf(a), &g);
                }
                if self.requires_grad(row) {
                    let gb = self.grad_buf(row);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + gv;
                    }
                }
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let bv = self.data(b).to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if self.requires_grad(b) {
                    let av = self.data(a).to_vec();
                    let gb = self.grad_buf(b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::ScalarMul { a, c, out } => {
                let (a, c, out) = (*a, *c, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * c;
                    }
                }
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                let g = og!(out);
                if self.requires_grad(a) {
                    let bv = self.data(b).to_vec();
                    mm_nt(self.grad_buf(a), &g, &bv, m, n, k); // dA[m×k] += G[m×n]·B[k×n]ᵀ... see note
                }
                if self.requires_grad(b) {
                    let av = self.data(a).to_vec();
                    mm_tn(self.grad_buf(b), &av, &g, k, m, n); // dB[k×n] += A[m×k]ᵀ·G[m×n]
                }
            }
            Op::MatmulNt { a, b, out, m, k, n } => {
                let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                let g = og!(out);
                if self.requires_grad(a) {
                    let bv = self.data(b).to_vec();
                    mm_nn(self.grad_buf(a), &g, &bv, m, n, k); // dA[m×k] += G[m×n]·B[n×k]
                }
                if self.requires_grad(b) {
                    let av = self.data(a).to_vec();
                    mm_tn(self.grad_buf(b), &g, &av, n, m, k); // dB[n×k] += G[m×n]ᵀ·A[m×k]
                }
            }
            Op::Clamp { a, lo, hi, out } => {
                let (a, lo, hi, out) = (*a, *lo, *hi, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let av = self.data(a).to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        if av[i] >= lo && av[i] <= hi {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            Op::Gelu { a, out } => {
                let (a, out) = (*a, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let av = self.data(a).to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::SoftmaxLast { a, out, cols } => {
                let (a, out, cols) = (*a, *out, *cols);
                let g = og!(out);
                if self.requires_grad(a) {
                    let y = self.data(out).to_vec();
                    let ga = self.grad_buf(a);
                    let rows = g.len() / cols;
                    for r in 0..rows {
                        let o = r * cols;
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot = dot + g[o + j] * y[o + j];
                        }
                        for j in 0..cols {
                            ga[o + j] = ga[o + j] + y[o + j] * (g[o + j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormLast { a, gamma, beta, out, cols, xhat, rstd } => {
                let (a, gamma, beta, out, cols) = (*a, *gamma, *beta, *out, *cols);
                let xhat = xhat.clone();
                let rstd = rstd.clone();
                let g = og!(out);
                let rows = g.len() / cols;
                let gv = self.data(gamma).to_vec();
                if self.requires_grad(a) {
                    let cn = T::c(cols as f64);
                    let ga = self.grad_buf(a);
                    for r in 0..rows {
                        let o = r * cols;
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..cols {
                            let dxh = g[o + j] * gv[j];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[o + j];
                        }
                        for j in 0..cols {
                            let dxh = g[o + j] * gv[j];
                            ga[o + j] = ga[o + j]
                                + rstd[r] * (dxh - sum_dxhat / cn - xhat[o + j] * sum_dxhat_xhat / cn);
                        }
                    }
                }
                if self.requires_grad(gamma) {
                    let gg = self.grad_buf(gamma);
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] = gg[j] + g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if self.requires_grad(beta) {
                    let gb = self.grad_buf(beta);
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] = gb[j] + g[r * cols + j];
                        }
                    }
                }
            }
            Op::L2NormalizeLast { a, out, cols, denoms } => {
                let (a, out, cols) = (*a, *out, *cols);
                let denoms = denoms.clone();
                let g = og!(out);
                if self.requires_grad(a) {
                    let y = self.data(out).to_vec();
                    let floor = T::c(L2_NORM_FLOOR);
                    let ga = self.grad_buf(a);
                    let rows = g.len() / cols;
                    for r in 0..rows {
                        let o = r * cols;
                        if denoms[r] > floor {
                            let mut dot = T::zero();
                            for j in 0..cols {
                                dot = dot + y[o + j] * g[o + j];
                            }
                            for j in 0..cols {
                                ga[o + j] = ga[o + j] + (g[o + j] - y[o + j] * dot) / denoms[r];
                            }
                        } else {
                            for j in 0..cols {
                                ga[o + j] = ga[o + j] + g[o + j] / denoms[r];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { a, idx, out, cols } => {
                let (a, out, cols) = (*a, *out, *cols);
                let idx = idx.clone();
                let g = og!(out);
                if self.requires_grad(a) {
                    let ga = self.grad_buf(a);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[i * cols + j] = ga[i * cols + j] + g[r * cols + j];
                        }
                    }
                }
            }
            Op::PickPerRow { a, idx, out, cols } => {
                let (a, out, cols) = (*a, *out, *cols);
                let idx = idx.clone();
                let g = og!(out);
                if self.requires_grad(a) {
                    let ga = self.grad_buf(a);
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * cols + j] = ga[r * cols + j] + g[r];
                    }
                }
            }
            Op::Mean { a, out } => {
                let (a, out) = (*a, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let n = self.nodes[a.0].data.len();
                    let inv = T::one() / T::c(n as f64);
                    let gv = g[0] * inv;
                    let ga = self.grad_buf(a);
                    for v in ga.iter_mut() {
                        *v = *v + gv;
                    }
                }
            }
            Op::Log { a, out } => {
                let (a, out) = (*a, *out);
                let g = og!(out);
                if self.requires_grad(a) {
                    let av = self.data(a).to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / av[i];
                    }
                }
            }
            Op::ConcatRows { parts, out, cols } => {
                let (out, cols) = (*out, *cols);
                let parts = parts.clone();
                let g = og!(out);
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.requires_grad(p) {
                        let gp = self.grad_buf(p);
                        for i in 0..len {
                            gp[i] = gp[i] + g[offset + i];
                        }
                    }
                    offset += len;
                    debug_assert_eq!(len % cols, 0);
                }
            }
            Op::SliceCols { a, start, len, out, cols } => {
                let (a, start, len, out, cols) = (*a, *start, *len, *out, *cols);
                let g = og!(out);
                if self.requires_grad(a) {
                    let ga = self.grad_buf(a);
                    let rows = g.len() / len;
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] = ga[r * cols + start + j] + g[r * len + j];
                        }
                    }
                }
            }
            Op::ExtractPatches { a, out, c, h, w, p } => {
                let (a, out, c, h, w, p) = (*a, *out, *c, *h, *w, *p);
                let g = og!(out);
                if self.requires_grad(a) {
                    let (ph, pw) = (h / p, w / p);
                    let ga = self.grad_buf(a);
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let row = pr * pw + pc;
                            for ch in 0..c {
                                for dy in 0..p {
                                    for dx in 0..p {
                                        let di = ch * h * w + (pr * p + dy) * w + (pc * p + dx);
                                        ga[di] = ga[di] + g[row * c * p * p + ch * p * p + dy * p + dx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let s = T::c(0.7978845608028654); // sqrt(2/pi)
    let c = T::c(0.044715);
    let half = T::c(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::c(0.7978845608028654);
    let c = T::c(0.044715);
    let half = T::c(0.5);
    let three = T::c(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

/// C[m×n] += A[m×k] · B[k×n]
pub(crate) fn mm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[m×n] += A[m×k] · B[n×k]ᵀ
pub(crate) fn mm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// C[m×n] += A[k×m]ᵀ · B[k×n]
pub(crate) fn mm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}
