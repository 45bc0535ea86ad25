//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a 1×1 node walks the tape in reverse and returns the
//! gradient of that scalar with respect to every recorded node.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type for tensors (`f32` for training, `f64` for gradient checks).
pub trait Real: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("finite cast"))
                .collect(),
        }
    }
}

/// C = A·B, with `a` (n×k) and `b` (k×m).
fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ, with `a` (n×k) and `b` (m×k).
fn matmul_tb<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// C = Aᵀ·B, with `a` (k×n) and `b` (k×m).
fn matmul_ta<T: Real>(a: &[T], b: &[T], k: usize, n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    // tanh approximation
    let c = T::lit(0.797_884_560_802_865_4);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + T::lit(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * 0.044715) * x2);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    MatMulTransB(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Stores each row's inverse norm.
    NormalizeRows(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    Row(Var, usize),
    DotConst(Var, Vec<T>),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    layer_norm_eps: T,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            layer_norm_eps: T::lit(1e-5),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn matrix(&self, v: Var) -> Matrix<T> {
        let n = &self.nodes[v.0];
        Matrix::from_vec(n.rows, n.cols, n.value.clone())
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.shape(v), (1, 1), "scalar() on non-scalar node");
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, m: &Matrix<T>) -> Var {
        self.push(m.rows, m.cols, m.data.clone(), Op::Leaf)
    }

    pub fn leaf_vec(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let v = matmul(self.value(a), self.value(b), n, k, m);
        self.push(n, m, v, Op::MatMul(a, b))
    }

    /// a·bᵀ
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_tb inner dimensions");
        let v = matmul_tb(self.value(a), self.value(b), n, k, m);
        self.push(n, m, v, Op::MatMulTransB(a, b))
    }

    /// Adds a 1×cols row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias shape");
        let b = self.value(bias).to_vec();
        let v = self
            .value(a)
            .chunks(m)
            .flat_map(|r| r.iter().zip(&b).map(|(&x, &y)| x + y))
            .collect();
        self.push(n, m, v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(b), (n, m), "add shapes");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(n, m, v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * s).collect();
        self.push(n, m, v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(n, m, v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).chunks(m).flat_map(softmax).collect();
        self.push(n, m, v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let v = self.value(a).chunks(m).flat_map(log_softmax).collect();
        self.push(n, m, v, Op::LogSoftmaxRows(a))
    }

    /// Scales every row to unit Euclidean length: x / √(Σx² + ε) with ε = 1e-12.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let eps = T::lit(1e-12);
        let mut v = Vec::with_capacity(n * m);
        let mut inv = Vec::with_capacity(n);
        for row in self.value(a).chunks(m) {
            let r = T::one() / (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            v.extend(row.iter().map(|&x| x * r));
            inv.push(r);
        }
        self.push(n, m, v, Op::NormalizeRows(a, inv))
    }

    /// Row-wise layer normalization with per-column scale `gamma` and offset `beta` (both 1×cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m));
        assert_eq!(self.shape(beta), (1, m));
        let eps = self.layer_norm_eps;
        let mf = T::from_usize(m).unwrap();
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut xhat = Vec::with_capacity(n * m);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).chunks(m) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            n,
            m,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start + len <= m, "slice_cols out of range");
        let v = self
            .value(a)
            .chunks(m)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push(n, len, v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, n, "concat_cols rows");
                self.shape(p).1
            })
            .collect();
        let m: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(n * m);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(n, m, v, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (na, m) = self.shape(a);
        let (nb, mb) = self.shape(b);
        assert_eq!(m, mb, "concat_rows cols");
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(na + nb, m, v, Op::ConcatRows(a, b))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(r < n);
        let v = self.value(a)[r * m..(r + 1) * m].to_vec();
        self.push(1, m, v, Op::Row(a, r))
    }

    /// Σ a ⊙ c for a constant `c`, as a 1×1 node.
    pub fn dot_const(&mut self, a: Var, c: Vec<T>) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "dot_const length");
        let s = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).sum();
        self.push(1, 1, vec![s], Op::DotConst(a, c))
    }

    /// Gradient of the 1×1 node `out` with respect to every node; `None` where unreached.
    pub fn backward(&self, out: Var) -> Vec<Option<Vec<T>>> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e = *e + x),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let (n, m) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => grads[idx] = Some(dy),
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    let da = matmul_tb(&dy, self.value(*b), n, m, k);
                    let db = matmul_ta(self.value(*a), &dy, n, k, m);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulTransB(a, b) => {
                    // y = a bᵀ, a: n×k, b: m×k
                    let k = self.shape(*a).1;
                    let da = matmul(&dy, self.value(*b), n, m, k);
                    let db = matmul_ta(&dy, self.value(*a), n, m, k);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = vec![T::zero(); m];
                    for r in dy.chunks(m) {
                        db.iter_mut().zip(r).for_each(|(d, &x)| *d = *d + x);
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *a, dy);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, dy.iter().map(|&g| g * s).collect());
                }
                Op::Gelu(a) => {
                    let d = self
                        .value(*a)
                        .iter()
                        .zip(&dy)
                        .map(|(&x, &g)| g * gelu_grad(x))
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Vec::with_capacity(n * m);
                    for (y, g) in node.value.chunks(m).zip(dy.chunks(m)) {
                        let dot: T = y.iter().zip(g).map(|(&p, &q)| p * q).sum();
                        d.extend(y.iter().zip(g).map(|(&p, &q)| p * (q - dot)));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = Vec::with_capacity(n * m);
                    for (y, g) in node.value.chunks(m).zip(dy.chunks(m)) {
                        let total: T = g.iter().copied().sum();
                        d.extend(y.iter().zip(g).map(|(&l, &q)| q - l.exp() * total));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::NormalizeRows(a, inv) => {
                    // dx = (g − y·(y·g)) / ‖x‖
                    let mut d = Vec::with_capacity(n * m);
                    for ((y, g), &r) in node.value.chunks(m).zip(dy.chunks(m)).zip(inv) {
                        let dot: T = y.iter().zip(g).map(|(&p, &q)| p * q).sum();
                        d.extend(y.iter().zip(g).map(|(&p, &q)| (q - p * dot) * r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let g = self.value(*gamma);
                    let mf = T::from_usize(m).unwrap();
                    let mut dg = vec![T::zero(); m];
                    let mut db = vec![T::zero(); m];
                    let mut dx = Vec::with_capacity(n * m);
                    for r in 0..n {
                        let dyr = &dy[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..m {
                            dg[j] = dg[j] + dyr[j] * hr[j];
                            db[j] = db[j] + dyr[j];
                            let dh = dyr[j] * g[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        let mean_dh = sum_dh / mf;
                        let mean_dh_h = sum_dh_h / mf;
                        for j in 0..m {
                            let dh = dyr[j] * g[j];
                            dx.push(rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h));
                        }
                    }
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols(a, start) => {
                    let (an, am) = self.shape(*a);
                    let mut d = vec![T::zero(); an * am];
                    for r in 0..n {
                        d[r * am + start..r * am + start + m].copy_from_slice(&dy[r * m..(r + 1) * m]);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&dy[r * m + offset..r * m + offset + w]);
                        }
                        acc(&mut grads, p, d);
                        offset += w;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).len();
                    acc(&mut grads, *b, dy[split..].to_vec());
                    acc(&mut grads, *a, dy[..split].to_vec());
                }
                Op::Row(a, r) => {
                    let (an, am) = self.shape(*a);
                    let mut d = vec![T::zero(); an * am];
                    d[r * am..(r + 1) * am].copy_from_slice(&dy);
                    acc(&mut grads, *a, d);
                }
                Op::DotConst(a, c) => {
                    let g = dy[0];
                    acc(&mut grads, *a, c.iter().map(|&x| x * g).collect());
                }
            }
        }
        grads
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}
