//! Small dense-tensor toolkit with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod adam;
mod attention;
mod layers;

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use adam::{Adam, AdamConfig};
pub use attention::{attention_backward, attention_forward, AttentionCache};
pub use layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear, LinearCache, Lora};

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, with `C` not aliasing `A` or `B`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match {rows}x{cols}");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Mat::from_fn(rows, cols, |_, _| T::from_f64(normal.sample(rng)))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `lo..hi`.
    pub fn rows_range(&self, lo: usize, hi: usize) -> Mat<T> {
        Mat::from_vec(hi - lo, self.cols, self.data[lo * self.cols..hi * self.cols].to_vec())
    }

    pub fn vstack(parts: &[&Mat<T>]) -> Mat<T> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
        }
        Mat::from_vec(data.len() / cols.max(1), cols, data)
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|x| U::from_f64(x.to_f64())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `op(a) * op(b)`.
    pub fn matmul(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool) -> Mat<T> {
        let m = if ta { a.cols } else { a.rows };
        let n = if tb { b.rows } else { b.cols };
        let mut c = Mat::zeros(m, n);
        gemm(T::ONE, a, ta, b, tb, T::ZERO, &mut c);
        c
    }
}

/// `c = alpha * op(a) op(b) + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, beta: T, c: &mut Mat<T>) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes were checked above; `c` is a distinct allocation.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// A tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Mat<T>,
    pub grad: Mat<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Mat<T>) -> Self {
        let grad = Mat::zeros(value.rows, value.cols);
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Mat<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            trainable: self.trainable,
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal of every parameter of a module, in a fixed order.
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| p.trainable = trainable);
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, p| {
            if p.trainable {
                names.push(name)
            }
        });
        names
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(row[0], T::max);
    let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Sinusoidal position table, `len x width`.
pub fn sinusoidal_positions<T: Real>(len: usize, width: usize) -> Mat<T> {
    Mat::from_fn(len, width, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows, b.cols, |i, j| (0..a.cols).map(|k| a.at(i, k) * b.at(k, j)).sum())
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Mat<f64> = Mat::randn(5, 7, 1.0, &mut rng);
        let b: Mat<f64> = Mat::randn(7, 3, 1.0, &mut rng);
        let want = naive(&a, &b);
        let cases = [
            Mat::matmul(&a, false, &b, false),
            Mat::matmul(&a.transpose(), true, &b, false),
            Mat::matmul(&a, false, &b.transpose(), true),
            Mat::matmul(&a.transpose(), true, &b.transpose(), true),
        ];
        for got in cases {
            for (x, y) in got.data.iter().zip(&want.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_f32_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Mat<f64> = Mat::randn(4, 9, 1.0, &mut rng);
        let b: Mat<f64> = Mat::randn(9, 6, 1.0, &mut rng);
        let want = naive(&a, &b);
        let got = Mat::matmul(&a.cast::<f32>(), false, &b.cast::<f32>(), false);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
    }

    #[test]
    fn log_softmax_of_uniform_row() {
        let row = vec![0.3f64; 200];
        let ls = log_softmax(&row);
        assert!((ls[17] + 200f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }
}
