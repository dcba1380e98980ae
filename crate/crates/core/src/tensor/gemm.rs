//! Safe single-threaded f32 matrix product over two BLAS-style kernels.

/// Row-major matrix view with optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this matrix as a logical operand.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical_dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out`, with `out` row-major `m × n`.
///
/// Plain products go to the `gemm` crate. Products with a transposed
/// operand and both output dimensions of at least 32 go to
/// `matrixmultiply`, whose packing is faster for that layout.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, out: &mut [f32]) {
    let (m, k) = a.logical_dims();
    let (kb, n) = b.logical_dims();
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert_eq!(out.len(), m * n, "gemm output has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let use_packed = (a.transposed || b.transposed) && m.min(n) >= 32;
    // SAFETY: the asserts above and `Mat::new` pin every operand's extent to
    // the dimensions passed, and `out` is exclusively borrowed.
    unsafe {
        if use_packed {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        } else {
            ::gemm::gemm(
                m,
                n,
                k,
                out.as_mut_ptr(),
                1,
                n as isize,
                beta != 0.0,
                a.data.as_ptr(),
                csa,
                rsa,
                b.data.as_ptr(),
                csb,
                rsb,
                beta,
                1.0f32,
                false,
                false,
                false,
                ::gemm::Parallelism::None,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_in_all_transpose_combinations() {
        for (m, k, n) in [(5, 7, 3), (40, 9, 33), (33, 50, 64)] {
            check_dims(m, k, n);
        }
    }

    fn check_dims(m: usize, k: usize, n: usize) {
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }

        let cases = [
            (Mat::new(&a, m, k), Mat::new(&b, k, n)),
            (Mat::new(&at, k, m).t(), Mat::new(&b, k, n)),
            (Mat::new(&a, m, k), Mat::new(&bt, n, k).t()),
            (Mat::new(&at, k, m).t(), Mat::new(&bt, n, k).t()),
        ];
        for (lhs, rhs) in cases {
            let mut out = vec![0.0; m * n];
            gemm(lhs, rhs, 0.0, &mut out);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4);
            }
            // accumulate path
            let mut acc = vec![1.0; m * n];
            gemm(lhs, rhs, 1.0, &mut acc);
            for (x, y) in acc.iter().zip(&want) {
                assert!((x - (y + 1.0)).abs() < 1e-4);
            }
        }
    }
}
