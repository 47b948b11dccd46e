//! Dense matrix kernels shared by matmul and convolution.
//!
//! All kernels accumulate into `out` in a fixed summation order, so a row of
//! the result depends only on the matching rows of the operands.

/// Register tile: `MR` output rows by `NR` output columns. The microkernel
/// below is written out for `MR = 4`.
const MR: usize = 4;
const NR: usize = 8;
/// Columns of `b` kept hot in cache while sweeping the rows of `a`.
const COL_BLOCK: usize = 512;

/// One output row restricted to `cols`, for rows and columns outside the tiles.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn row_axpy(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    r: usize,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    rs: usize,
    cs: usize,
) {
    let orow = &mut out[r * n + cols.start..r * n + cols.end];
    for (kk, brow) in b.chunks_exact(n).enumerate().take(k) {
        let av = a[r * rs + kk * cs];
        for (o, &bv) in orow.iter_mut().zip(&brow[cols.clone()]) {
            *o += av * bv;
        }
    }
}

/// `out[m,n] += A · b[k,n]` where `A[i,kk] = a[i * rs + kk * cs]`.
///
/// Every output element is accumulated in ascending `kk` order starting from
/// its current value, whichever path computes it.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, rs: usize, cs: usize) {
    let full_rows = m - m % MR;
    let mut panel = vec![0.0; k * MR];
    for jb in (0..n).step_by(COL_BLOCK) {
        let jend = (jb + COL_BLOCK).min(n);
        let full_cols = jend - (jend - jb) % NR;
        for i in (0..full_rows).step_by(MR) {
            for (kk, p) in panel.chunks_exact_mut(MR).enumerate() {
                for (r, v) in p.iter_mut().enumerate() {
                    *v = a[(i + r) * rs + kk * cs];
                }
            }
            for j in (jb..full_cols).step_by(NR) {
                let load = |r: usize| -> [f64; NR] {
                    out[(i + r) * n + j..(i + r) * n + j + NR].try_into().unwrap()
                };
                let (mut c0, mut c1, mut c2, mut c3) = (load(0), load(1), load(2), load(3));
                for (ap, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                    let bv: &[f64; NR] = brow[j..j + NR].try_into().unwrap();
                    let (a0, a1, a2, a3) = (ap[0], ap[1], ap[2], ap[3]);
                    for c in 0..NR {
                        c0[c] += a0 * bv[c];
                        c1[c] += a1 * bv[c];
                        c2[c] += a2 * bv[c];
                        c3[c] += a3 * bv[c];
                    }
                }
                for (r, row) in [c0, c1, c2, c3].iter().enumerate() {
                    out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
            }
            if full_cols < jend {
                for r in i..i + MR {
                    row_axpy(out, a, b, r, full_cols..jend, k, n, rs, cs);
                }
            }
        }
    }
    for r in full_rows..m {
        row_axpy(out, a, b, r, 0..n, k, n, rs, cs);
    }
}

#[inline(always)]
fn mm_nn_body(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(out, a, b, m, k, n, k, 1);
}

#[inline(always)]
fn mm_tn_body(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(out, a, b, m, k, n, 1, m);
}

#[inline(always)]
fn mm_nt_body(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    gemm(out, a, &bt, m, k, n, k, 1);
}

/// Defines a kernel that runs an AVX2-compiled copy of `$body` when the CPU
/// supports it. Rust never contracts `a * b + c` into an FMA, so both copies
/// round identically.
macro_rules! kernel {
    ($(#[$doc:meta])* $name:ident, $avx:ident, $body:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
            $body(out, a, b, m, k, n)
        }

        $(#[$doc])*
        pub(crate) fn $name(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
            #[cfg(target_arch = "x86_64")]
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { $avx(out, a, b, m, k, n) };
            }
            $body(out, a, b, m, k, n)
        }
    };
}

kernel!(
    /// `out[m,n] += a[m,k] · b[k,n]`
    mm_nn, mm_nn_avx2, mm_nn_body
);
kernel!(
    /// `out[m,n] += a[m,k] · b[n,k]ᵀ`
    mm_nt, mm_nt_avx2, mm_nt_body
);
kernel!(
    /// `out[m,n] += a[k,m]ᵀ · b[k,n]`
    mm_tn, mm_tn_avx2, mm_tn_body
);
