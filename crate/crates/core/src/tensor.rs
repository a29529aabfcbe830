//! Dense row-major matrix kernels shared by the transformer and the proxy embedder.
//!
//! Products go through `matrixmultiply`; everything else is plain loops.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type the networks are generic over. Training runs in `f32`;
/// finite-difference checks run the same code in `f64`.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a * b + beta * c` on strided views.
    ///
    /// # Safety
    /// Every index reachable through the given strides must be in bounds of
    /// the corresponding pointer's allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Float for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Float> View<'a, F> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "view out of bounds");
        }
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Columns `start..start + width` of a row-major matrix with row stride `rs`.
    pub fn cols_of(data: &'a [F], rows: usize, rs: usize, start: usize, width: usize) -> Self {
        Self::strided(&data[start..], rows, width, rs, 1)
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Mutable strided view.
pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Float> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "view out of bounds");
        }
        ViewMut {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn cols_of(data: &'a mut [F], rows: usize, rs: usize, start: usize, width: usize) -> Self {
        Self::strided(&mut data[start..], rows, width, rs, 1)
    }
}

/// `c = a * b` (overwrite) or `c += a * b` (accumulate).
pub fn gemm<F: Float>(a: View<'_, F>, b: View<'_, F>, c: ViewMut<'_, F>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "row mismatch");
    assert_eq!(b.cols, c.cols, "column mismatch");
    let beta = if accumulate { F::one() } else { F::zero() };
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        if !accumulate {
            for r in 0..c.rows {
                for col in 0..c.cols {
                    c.data[r * c.rs + col * c.cs] = F::zero();
                }
            }
        }
        return;
    }
    // SAFETY: the views' constructors checked that the farthest strided
    // element lies inside each slice, and `c` is a unique borrow.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major product of contiguous matrices: `out[m x n] = a[m x k] * b[k x n]`.
pub fn matmul<F: Float>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    gemm(
        View::new(a, m, k),
        View::new(b, k, n),
        ViewMut::new(out, m, n),
        false,
    );
}

/// Adds `bias[n]` to every row of `x[rows x n]`.
pub fn add_row_bias<F: Float>(x: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates column sums of `x[rows x n]` into `out[n]`.
pub fn add_col_sums<F: Float>(x: &[F], out: &mut [F]) {
    let n = out.len();
    for row in x.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    // f32 accumulation over a few hundred entries drifts by ~1e-6
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.f64();
    }
    let inv = F::of(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row, computed in `f64`.
pub fn log_softmax_f64<F: Float>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.f64() - lse).collect()
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
