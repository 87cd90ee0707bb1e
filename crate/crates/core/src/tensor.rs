//! Row-major matrices and the scalar trait the network is generic over.
//!
//! Training runs in `f32`; gradient checking runs the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type with a GEMM kernel.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The pointer/stride combinations must describe valid matrices of the
    /// given shapes, and `c` must not alias `a` or `b`.
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

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn convert<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// `c (+)= a[rows a0..] · b` where `a` is `m×k` (a row window of a larger
/// matrix) and `b` is `k×n`.
pub fn matmul_into<T: Scalar>(a: &[T], m: usize, k: usize, b: &Mat<T>, c: &mut [T], accumulate: bool) {
    assert_eq!(b.rows, k);
    assert!(a.len() >= m * k && c.len() >= m * b.cols);
    let n = b.cols;
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: shapes checked above; a, b and c are distinct borrows.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b` for an `m×k` row window `a`.
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(m, b.cols);
    matmul_into(a, m, k, b, &mut c.data, false);
    c
}

/// `c += aᵀ · b` for row-major `a` (`m×k`) and `b` (`m×n`); `c` is `k×n`.
/// Used for weight gradients.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut Mat<T>) {
    assert_eq!((c.rows, c.cols), (k, n));
    assert!(a.len() >= m * k && b.len() >= m * n);
    if m == 0 {
        return;
    }
    // SAFETY: aᵀ is addressed by swapping strides; shapes checked above.
    unsafe {
        T::gemm(
            k,
            m,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::ONE,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (+)= a · bᵀ` for row-major `a` (`m×n`) and a weight `b` (`k×n`);
/// `c` is `m×k`. Used to push gradients back through a weight.
pub fn matmul_nt_into<T: Scalar>(a: &[T], m: usize, b: &Mat<T>, c: &mut [T], accumulate: bool) {
    let (k, n) = (b.rows, b.cols);
    assert!(a.len() >= m * n && c.len() >= m * k);
    if m == 0 {
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: bᵀ is addressed by swapping strides; shapes checked above.
    unsafe {
        T::gemm(
            m,
            n,
            k,
            T::ONE,
            a.as_ptr(),
            n as isize,
            1,
            b.data.as_ptr(),
            1,
            n as isize,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// Strided view of a matrix inside a slice: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Debug, Clone, Copy)]
pub struct Strided {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub const fn row_major(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major window.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a·b + beta·c` on strided windows, with bounds checked up front.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strided,
    b: &[T],
    sb: Strided,
    beta: T,
    c: &mut [T],
    sc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(sc.last(m, n) < c.len(), "gemm output window out of bounds");
    if k > 0 {
        assert!(sa.last(m, k) < a.len(), "gemm lhs window out of bounds");
        assert!(sb.last(k, n) < b.len(), "gemm rhs window out of bounds");
    }
    // SAFETY: every addressed element was bounds-checked above and `c` is an
    // exclusive borrow distinct from `a` and `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr().add(sa.offset),
            sa.row_stride as isize,
            sa.col_stride as isize,
            b.as_ptr().add(sb.offset),
            sb.row_stride as isize,
            sb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(sc.offset),
            sc.row_stride as isize,
            sc.col_stride as isize,
        );
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                c.data[i * b.cols + j] = (0..a.cols)
                    .map(|p| a.data[i * a.cols + p] * b.data[p * b.cols + j])
                    .sum();
            }
        }
        c
    }

    fn transpose(a: &Mat<f64>) -> Mat<f64> {
        let mut t = Mat::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                t.data[j * a.rows + i] = a.data[i * a.cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = rand::rng();
        let a = Mat::<f64>::randn(5, 3, 1.0, &mut rng);
        let b = Mat::<f64>::randn(3, 4, 1.0, &mut rng);
        let c = matmul(&a.data, 5, 3, &b);
        let want = naive(&a, &b);
        for (x, y) in c.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c where a is 5x3 and c is 5x4 → 3x4
        let mut acc = Mat::zeros(3, 4);
        matmul_tn_acc(&a.data, &c.data, 5, 3, 4, &mut acc);
        let want = naive(&transpose(&a), &c);
        for (x, y) in acc.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }

        // c·bᵀ where c is 5x4 and b is 3x4 → 5x3
        let mut out = vec![0.0; 15];
        matmul_nt_into(&c.data, 5, &b, &mut out, false);
        let want = naive(&c, &transpose(&b));
        for (x, y) in out.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
