/// A strided matrix view: `(data, row_stride, col_stride)`.
pub(crate) type MatRef<'a> = (&'a [f32], usize, usize);

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with `c` dense row-major.
///
/// `a` and `b` are arbitrary strided views, so transposes cost nothing.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(
        (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm lhs view out of bounds"
    );
    assert!(
        (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm rhs view out of bounds"
    );
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed with at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
