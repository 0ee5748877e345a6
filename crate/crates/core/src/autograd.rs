//! Minimal tape-based reverse-mode autodiff over dense f64 matrices.
//!
//! Every value is a row-major `rows x cols` matrix. Nodes are appended to a
//! [`Graph`] in evaluation order; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients only for nodes that depend on a trainable leaf.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += s;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability clamp applied before taking logs in the distillation BCE.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Rc<Vec<f64>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    BceLogitsMean(Var, Rc<Vec<f64>>),
    ClampedBceMean(Var, Rc<Vec<f64>>),
    SoftDice(Var, Rc<Vec<f64>>),
    SqDist(Var, Rc<Vec<f64>>, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;
const DICE_SMOOTH: f64 = 1.0;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_bt inner dims");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm_bt_acc(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.rows);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{what} shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y, "add");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y, "sub");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y, "mul");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tr.shape(), "add_row shape");
        let mut out = ta.clone();
        for chunk in out.data.chunks_mut(ta.cols) {
            for (o, &r) in chunk.iter_mut().zip(&tr.data) {
                *o += r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!((ta.rows, 1), tc.shape(), "mul_col shape");
        let mut out = ta.clone();
        for (chunk, &s) in out.data.chunks_mut(ta.cols).zip(&tc.data) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for chunk in out.data.chunks_mut(t.cols) {
            let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in chunk.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            chunk.iter_mut().for_each(|x| *x /= s);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows);
        for chunk in out.data.chunks_mut(t.cols) {
            let n = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            chunk.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows(a, Rc::new(inv_std)), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `out.data[i] = a.data[idx[i]]`, shaped `rows x cols`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let t = self.value(a);
        let data = idx.iter().map(|&i| t.data[i]).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(rows, cols, data), Op::Gather(a, idx), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let cols = self.value(a).cols;
        let idx: Vec<usize> = (start * cols..(start + n) * cols).collect();
        self.gather(a, Rc::new(idx), n, cols)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::new(rows, cols, t.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.cols, t.rows);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::new(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable mean binary cross-entropy on logits.
    pub fn bce_logits_mean(&mut self, logits: Var, target: Rc<Vec<f64>>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), target.len(), "bce target length");
        let s: f64 = t
            .data
            .iter()
            .zip(target.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::new(1, 1, vec![s / t.len() as f64]);
        let ng = self.ng(logits);
        self.push(out, Op::BceLogitsMean(logits, target), ng)
    }

    /// Mean BCE between `sigmoid(logits)` clamped to `[PROB_CLAMP, 1-PROB_CLAMP]`
    /// and a soft target.
    pub fn clamped_bce_mean(&mut self, logits: Var, target: Rc<Vec<f64>>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), target.len(), "bce target length");
        let s: f64 = t
            .data
            .iter()
            .zip(target.iter())
            .map(|(&x, &y)| {
                let p = sigmoid(x).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::new(1, 1, vec![s / t.len() as f64]);
        let ng = self.ng(logits);
        self.push(out, Op::ClampedBceMean(logits, target), ng)
    }

    /// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` with `p = sigmoid(logits)`.
    pub fn soft_dice_loss(&mut self, logits: Var, target: Rc<Vec<f64>>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), target.len(), "dice target length");
        let (mut inter, mut sp) = (0.0, 0.0);
        for (&x, &y) in t.data.iter().zip(target.iter()) {
            let p = sigmoid(x);
            inter += p * y;
            sp += p;
        }
        let st: f64 = target.iter().sum();
        let v = 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH);
        let ng = self.ng(logits);
        self.push(Tensor::new(1, 1, vec![v]), Op::SoftDice(logits, target), ng)
    }

    /// `scale * ||a - target||^2`
    pub fn sq_dist(&mut self, a: Var, target: Rc<Vec<f64>>, scale: f64) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), target.len(), "sq_dist length");
        let s: f64 = t.data.iter().zip(target.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a);
        self.push(Tensor::new(1, 1, vec![scale * s]), Op::SqDist(a, target, scale), ng)
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(go) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop(i, &op, &go);
            self.grads[i] = Some(go);
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, go: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.ng(*a) {
                    let bv = self.value(*b).data.clone();
                    self.acc(*a, |g| gemm_bt_acc(go, &bv, g, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data.clone();
                    self.acc(*b, |g| gemm_at_acc(&av, go, g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m x n] = a[m x k] b[n x k]^T
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.ng(*a) {
                    let bv = self.value(*b).data.clone();
                    self.acc(*a, |g| gemm_acc(go, &bv, g, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data.clone();
                    self.acc(*b, |g| gemm_at_acc(go, &av, g, m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
                self.acc(*b, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
                self.acc(*b, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data.clone();
                    self.acc(*a, |g| {
                        for ((x, y), z) in g.iter_mut().zip(go).zip(&bv) {
                            *x += y * z;
                        }
                    });
                }
                if self.ng(*b) {
                    let av = self.value(*a).data.clone();
                    self.acc(*b, |g| {
                        for ((x, y), z) in g.iter_mut().zip(go).zip(&av) {
                            *x += y * z;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                let cols = self.shape(*a).1;
                self.acc(*a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
                self.acc(*row, |g| {
                    for chunk in go.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let cols = self.shape(*a).1;
                if self.ng(*a) {
                    let cv = self.value(*col).data.clone();
                    self.acc(*a, |g| {
                        for ((gc, oc), &s) in g.chunks_mut(cols).zip(go.chunks(cols)).zip(&cv) {
                            gc.iter_mut().zip(oc).for_each(|(x, y)| *x += y * s);
                        }
                    });
                }
                if self.ng(*col) {
                    let av = self.value(*a).data.clone();
                    self.acc(*col, |g| {
                        for (r, gr) in g.iter_mut().enumerate() {
                            let s: f64 = go[r * cols..(r + 1) * cols]
                                .iter()
                                .zip(&av[r * cols..(r + 1) * cols])
                                .map(|(x, y)| x * y)
                                .sum();
                            *gr += s;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += s * y));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data.clone();
                self.acc(*a, |g| {
                    for ((x, y), &z) in g.iter_mut().zip(go).zip(&av) {
                        *x += y * gelu_grad(z);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ov = self.nodes[i].value.data.clone();
                self.acc(*a, |g| {
                    for ((x, y), &s) in g.iter_mut().zip(go).zip(&ov) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            Op::Cos(a) => {
                let av = self.value(*a).data.clone();
                self.acc(*a, |g| {
                    for ((x, y), &z) in g.iter_mut().zip(go).zip(&av) {
                        *x -= y * z.sin();
                    }
                });
            }
            Op::Sin(a) => {
                let av = self.value(*a).data.clone();
                self.acc(*a, |g| {
                    for ((x, y), &z) in g.iter_mut().zip(go).zip(&av) {
                        *x += y * z.cos();
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let cols = self.shape(*a).1;
                let ov = self.nodes[i].value.data.clone();
                self.acc(*a, |g| {
                    for ((gc, oc), yc) in g.chunks_mut(cols).zip(go.chunks(cols)).zip(ov.chunks(cols)) {
                        let dot: f64 = oc.iter().zip(yc).map(|(d, y)| d * y).sum();
                        for ((x, d), y) in gc.iter_mut().zip(oc).zip(yc) {
                            *x += y * (d - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, inv_std) => {
                let cols = self.shape(*a).1;
                let ov = self.nodes[i].value.data.clone();
                let inv_std = inv_std.clone();
                self.acc(*a, |g| {
                    let n = cols as f64;
                    for (r, ((gc, oc), yc)) in g
                        .chunks_mut(cols)
                        .zip(go.chunks(cols))
                        .zip(ov.chunks(cols))
                        .enumerate()
                    {
                        let md = oc.iter().sum::<f64>() / n;
                        let mdy = oc.iter().zip(yc).map(|(d, y)| d * y).sum::<f64>() / n;
                        for ((x, d), y) in gc.iter_mut().zip(oc).zip(yc) {
                            *x += inv_std[r] * (d - md - y * mdy);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let seg = &go[off..off + n];
                    self.acc(p, |g| g.iter_mut().zip(seg).for_each(|(x, y)| *x += y));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols;
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    self.acc(p, |g| {
                        for r in 0..rows {
                            let src = &go[r * total + off..r * total + off + cols];
                            g[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    off += cols;
                }
            }
            Op::Gather(a, idx) => {
                let idx = idx.clone();
                self.acc(*a, |g| {
                    for (&j, &y) in idx.iter().zip(go) {
                        g[j] += y;
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(*a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            }
            Op::Transpose(a) => {
                let (rows, cols) = self.shape(*a);
                self.acc(*a, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += go[c * rows + r];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let y = go[0];
                self.acc(*a, |g| g.iter_mut().for_each(|x| *x += y));
            }
            Op::BceLogitsMean(a, target) => {
                let av = self.value(*a).data.clone();
                let k = go[0] / av.len() as f64;
                let target = target.clone();
                self.acc(*a, |g| {
                    for ((x, &z), &t) in g.iter_mut().zip(&av).zip(target.iter()) {
                        *x += k * (sigmoid(z) - t);
                    }
                });
            }
            Op::ClampedBceMean(a, target) => {
                let av = self.value(*a).data.clone();
                let k = go[0] / av.len() as f64;
                let target = target.clone();
                self.acc(*a, |g| {
                    for ((x, &z), &t) in g.iter_mut().zip(&av).zip(target.iter()) {
                        let s = sigmoid(z);
                        if s > PROB_CLAMP && s < 1.0 - PROB_CLAMP {
                            // d/dz of -(t ln s + (1-t) ln(1-s)) = s - t
                            *x += k * (s - t);
                        }
                    }
                });
            }
            Op::SoftDice(a, target) => {
                let av = self.value(*a).data.clone();
                let target = target.clone();
                let (mut inter, mut sp) = (0.0, 0.0);
                for (&z, &t) in av.iter().zip(target.iter()) {
                    let p = sigmoid(z);
                    inter += p * t;
                    sp += p;
                }
                let st: f64 = target.iter().sum();
                let num = 2.0 * inter + DICE_SMOOTH;
                let den = sp + st + DICE_SMOOTH;
                let y = go[0];
                self.acc(*a, |g| {
                    for ((x, &z), &t) in g.iter_mut().zip(&av).zip(target.iter()) {
                        let p = sigmoid(z);
                        let dldp = -(2.0 * t * den - num) / (den * den);
                        *x += y * dldp * p * (1.0 - p);
                    }
                });
            }
            Op::SqDist(a, target, s) => {
                let av = self.value(*a).data.clone();
                let k = go[0] * 2.0 * s;
                let target = target.clone();
                self.acc(*a, |g| {
                    for ((x, &z), &t) in g.iter_mut().zip(&av).zip(target.iter()) {
                        *x += k * (z - t);
                    }
                });
            }
        }
    }

    /// Gradient of the last backward output w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }
}
