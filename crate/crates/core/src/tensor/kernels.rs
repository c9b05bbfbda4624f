//! Strided matrix-multiply kernels shared by the tape ops and the probes.

/// A strided view over a row-major buffer: element (r, c) lives at
/// `offset + r * rs + c * cs`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(cols: usize) -> Self {
        Self { offset: 0, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

/// `c = alpha * a · b + beta * c` where `a` is `m × k` and `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    let a_last = av.offset + (m - 1) * av.rs + k.saturating_sub(1) * av.cs;
    let b_last = bv.offset + k.saturating_sub(1) * bv.rs + (n - 1) * bv.cs;
    let c_last = cv.offset + (m - 1) * cv.rs + (n - 1) * cv.cs;
    assert!(k == 0 || (a_last < a.len() && b_last < b.len()), "gemm input view out of bounds");
    assert!(c_last < c.len(), "gemm output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[cv.offset + i * cv.rs + j * cv.cs];
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: bounds of every addressed element were checked above and the
    // output buffer does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Plain row-major `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, View::rows(k), b, View::rows(n), 0.0, &mut c, View::rows(n));
    c
}
