//! Dense `f32` tensors, seeded randomness and the reverse-mode rules for
//! every differentiable primitive.
//!
//! Tensors are plain row-major buffers with shape metadata. There is no
//! broadcasting beyond scalar-vs-tensor, and no dynamic graph: each
//! primitive comes with an explicit vector-Jacobian product that the
//! network layers compose by hand.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new([rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
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

    /// Number of rows when viewed as a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row width when viewed as a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn as_mat(&self) -> Mat<'_> {
        Mat::new(&self.data, self.rows(), self.cols())
    }
}

/// Strided read-only matrix view, used to express transposes without copies.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    pub(crate) fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a·b + beta * c` where `c` is a contiguous `a.rows × b.cols` buffer.
pub(crate) fn gemm(alpha: f32, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output extent");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were constructed from slices whose lengths cover every
    // (row, col) addressed through the strides, and `c` is exactly m*n long.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok(())
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    if a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n) = (a.shape[0], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(1.0, a.as_mat(), b.as_mat(), 0.0, &mut out);
    Tensor::new([m, n], out)
}

/// Gradients of `matmul(a, b)` given the upstream gradient `grad` (m×n).
pub fn matmul_vjp(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if grad.shape() != [m, n] || b.rows() != k {
        return Err(Error::ShapeMismatch {
            op: "matmul_vjp",
            lhs: grad.shape.clone(),
            rhs: vec![m, n],
        });
    }
    let mut ga = vec![0.0; m * k];
    gemm(1.0, grad.as_mat(), b.as_mat().t(), 0.0, &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm(1.0, a.as_mat().t(), grad.as_mat(), 0.0, &mut gb);
    Ok((Tensor::new([m, k], ga)?, Tensor::new([k, n], gb)?))
}

/// Sign with the binarization convention `sign(0) = +1`.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn hardtanh(v: f32) -> f32 {
    v.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sign,
    Hardtanh,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub fn unary(op: UnaryOp, x: &Tensor) -> Result<Tensor> {
    let out = match op {
        UnaryOp::Relu => x.map(|v| v.max(0.0)),
        UnaryOp::Sign => x.map(sign),
        UnaryOp::Hardtanh => x.map(hardtanh),
        UnaryOp::Exp => x.map(f32::exp),
        UnaryOp::Log => {
            if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
            x.map(f32::ln)
        }
    };
    Ok(out)
}

/// Vector-Jacobian product of a unary op at `x`.
///
/// `Sign` has zero derivative almost everywhere; its rule here is the
/// straight-through estimator (pass where `|x| <= 1`), which is what the
/// binarized layers differentiate.
pub fn unary_vjp(op: UnaryOp, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    same_shape("unary_vjp", x, grad)?;
    let d: Vec<f32> = x
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&v, &g)| match op {
            UnaryOp::Relu => {
                if v > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            UnaryOp::Sign | UnaryOp::Hardtanh => {
                if v.abs() <= 1.0 {
                    g
                } else {
                    0.0
                }
            }
            UnaryOp::Exp => g * v.exp(),
            UnaryOp::Log => g / v,
        })
        .collect();
    Tensor::new(x.shape.clone(), d)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn apply(op: BinaryOp, a: f32, b: f32) -> f32 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
    }
}

/// Pointwise binary op. Operands must share a shape, or one must be a scalar.
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| apply(op, x, y))
            .collect();
        return Tensor::new(a.shape.clone(), data);
    }
    if b.is_scalar() {
        let y = b.data[0];
        return Ok(a.map(|x| apply(op, x, y)));
    }
    if a.is_scalar() {
        let x = a.data[0];
        return Ok(b.map(|y| apply(op, x, y)));
    }
    Err(Error::ShapeMismatch {
        op: "binary",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

/// Gradients of `binary(op, a, b)` w.r.t. both operands. A scalar operand
/// receives the sum of its broadcast gradient.
pub fn binary_vjp(op: BinaryOp, a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let out_shape = if a.shape == b.shape || b.is_scalar() {
        &a.shape
    } else {
        &b.shape
    };
    if grad.shape() != out_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "binary_vjp",
            lhs: grad.shape.clone(),
            rhs: out_shape.clone(),
        });
    }
    let n = grad.len();
    let at = |t: &Tensor, i: usize| if t.len() == n { t.data[i] } else { t.data[0] };
    let mut ga = vec![0.0f32; n];
    let mut gb = vec![0.0f32; n];
    for i in 0..n {
        let g = grad.data[i];
        let (da, db) = match op {
            BinaryOp::Add => (g, g),
            BinaryOp::Sub => (g, -g),
            BinaryOp::Mul => (g * at(b, i), g * at(a, i)),
        };
        ga[i] = da;
        gb[i] = db;
    }
    let reduce = |t: &Tensor, g: Vec<f32>| -> Result<Tensor> {
        if t.len() == n && t.shape == *out_shape {
            Tensor::new(t.shape.clone(), g)
        } else {
            let s: f64 = g.iter().map(|&v| v as f64).sum();
            Tensor::new(t.shape.clone(), vec![s as f32])
        }
    };
    Ok((reduce(a, ga)?, reduce(b, gb)?))
}

/// Deterministic seeded generator.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed for a
/// given seed on every platform. Independent streams for parallel work are
/// derived with ChaCha's stream selector, so per-sample draws do not depend
/// on iteration order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    /// Recorded in reports so a run names the generator that produced it.
    pub const ALGORITHM: &'static str = "chacha8/rand_chacha-0.9+ziggurat-normal/rand_distr-0.5";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for stream `stream` of `seed`; distinct streams are independent.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// I.i.d. standard normal draws.
pub fn gaussian(rng: &mut Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = rng.normal());
    t
}

/// I.i.d. uniform draws on `[lo, hi]`.
pub fn uniform(rng: &mut Rng, shape: impl Into<Vec<usize>>, lo: f32, hi: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = rng.uniform(lo, hi));
    t
}
