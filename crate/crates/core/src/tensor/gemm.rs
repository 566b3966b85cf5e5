use super::Scalar;

// Per-row work below which the plain loop beats the packed kernel. The
// choice depends only on `k·n`, never on `m`, so each output row is computed
// the same way regardless of how many rows share the call.
const SMALL_GEMM: usize = 512;

/// `c (+)= op(a) · op(b)` for row-major buffers.
///
/// `a` is `[m, k]`, or `[k, m]` when `a_t`; `b` is `[k, n]`, or `[n, k]` when
/// `b_t`. `c` is `[m, n]`. With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };

    if k * n <= SMALL_GEMM {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa as usize + p * csa as usize];
                if b_t {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv = *cv + av * b[j * k + p];
                    }
                } else {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + av * bv;
                    }
                }
            }
        }
        return;
    }
    // SAFETY: sizes were asserted above and the strides describe exactly
    // those buffers; `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
