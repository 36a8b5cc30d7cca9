//! Matrix product kernels over row-major slices.

/// Layout of one gemm operand: stored as given, or stored transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] (+ c when accumulate)`.
///
/// Each output element sums over `k` in ascending order regardless of `m`,
/// so a row's value never depends on how many other rows are computed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain triple loop for the many tiny per-head products where packing
/// overhead would dominate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_small(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|x| *x = 0.0);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = match la {
                Layout::Normal => a[i * k + p],
                Layout::Transposed => a[p * m + i],
            };
            if av == 0.0 {
                continue;
            }
            match lb {
                Layout::Normal => {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
                Layout::Transposed => {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b[j * k + p];
                    }
                }
            }
        }
    }
}
