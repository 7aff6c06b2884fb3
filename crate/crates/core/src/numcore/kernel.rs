//! Register-tiled `C = A B + beta C` for row-major operands with a short
//! inner dimension, as produced by the per-pair edge network. Uses AVX2/FMA
//! when the CPU has it and falls back to portable loops otherwise.

/// Whether [`gemm_nn`] runs the vectorised kernel on this CPU.
pub(crate) fn accelerated() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, all row-major with the given
/// leading dimensions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nn(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k && c.len() >= (m - 1) * ldc + n);
    assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    #[cfg(target_arch = "x86_64")]
    {
        if accelerated() {
            // SAFETY: the CPU supports the enabled features and the asserts
            // above bound every access.
            unsafe { avx2::gemm_nn((m, k, n), a, lda, b, ldb, c, ldc, beta) };
            return;
        }
    }
    portable((0, m), (0, n), k, a, lda, b, ldb, c, ldc, beta);
}

/// Plain loops over rows `rows.0..rows.1` and columns `cols.0..cols.1`.
#[allow(clippy::too_many_arguments)]
fn portable(
    rows: (usize, usize),
    cols: (usize, usize),
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    beta: f64,
) {
    for i in rows.0..rows.1 {
        for j in cols.0..cols.1 {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * lda + p] * b[p * ldb + j];
            }
            let o = &mut c[i * ldc + j];
            *o = if beta == 0.0 { acc } else { beta * *o + acc };
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    const MR: usize = 6;
    const NR: usize = 8;

    /// Lane masks selecting the first `w` of 8 columns, as two halves.
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn masks(w: usize) -> (__m256i, __m256i) {
        let lane = |l: usize| if l < w { -1i64 } else { 0 };
        (
            _mm256_set_epi64x(lane(3), lane(2), lane(1), lane(0)),
            _mm256_set_epi64x(lane(7), lane(6), lane(5), lane(4)),
        )
    }

    /// `rows` (1 to 6) rows by up to 8 columns; `w < 8` uses masked access.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile(
        rows: usize,
        w: usize,
        k: usize,
        a: *const f64,
        lda: usize,
        b: *const f64,
        ldb: usize,
        c: *mut f64,
        ldc: usize,
        beta: f64,
    ) {
        let (m0, m1) = masks(w);
        let load = |p: *const f64, half: usize| {
            if w == NR {
                _mm256_loadu_pd(p.add(4 * half))
            } else {
                _mm256_maskload_pd(p.add(4 * half), if half == 0 { m0 } else { m1 })
            }
        };
        let mut acc = [_mm256_setzero_pd(); 2 * MR];
        // Row pointers beyond `rows` alias row 0 and are never stored.
        let ar: [*const f64; MR] = std::array::from_fn(|r| a.add(if r < rows { r * lda } else { 0 }));
        let mut brow = b;
        for p in 0..k {
            let b0 = load(brow, 0);
            let b1 = load(brow, 1);
            for r in 0..MR {
                let x = _mm256_broadcast_sd(&*ar[r].add(p));
                acc[2 * r] = _mm256_fmadd_pd(x, b0, acc[2 * r]);
                acc[2 * r + 1] = _mm256_fmadd_pd(x, b1, acc[2 * r + 1]);
            }
            brow = brow.add(ldb);
        }
        let vbeta = _mm256_set1_pd(beta);
        for r in 0..rows {
            for half in 0..2 {
                let out = c.add(r * ldc + 4 * half);
                let mut v = acc[2 * r + half];
                if beta != 0.0 {
                    v = _mm256_fmadd_pd(vbeta, load(out, 0), v);
                }
                if w == NR {
                    _mm256_storeu_pd(out, v);
                } else {
                    _mm256_maskstore_pd(out, if half == 0 { m0 } else { m1 }, v);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm_nn(
        (m, k, n): (usize, usize, usize),
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        beta: f64,
    ) {
        let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        for i0 in (0..m).step_by(MR) {
            let rows = MR.min(m - i0);
            for j0 in (0..n).step_by(NR) {
                let w = NR.min(n - j0);
                tile(rows, w, k, ap.add(i0 * lda), lda, bp.add(j0), ldb, cp.add(i0 * ldc + j0), ldc, beta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_portable_loops_with_ragged_edges() {
        for &(m, k, n) in &[(9, 5, 19), (4, 18, 64), (13, 1, 8), (3, 7, 5), (256, 32, 64)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let c0: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.05).sin()).collect();
            for beta in [0.0, 1.0, 0.5] {
                let mut want = c0.clone();
                portable((0, m), (0, n), k, &a, k, &b, n, &mut want, n, beta);
                let mut got = c0.clone();
                gemm_nn((m, k, n), &a, k, &b, n, &mut got, n, beta);
                for (x, y) in got.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "{m}x{k}x{n} beta {beta}");
                }
            }
        }
    }

    #[test]
    fn beta_zero_overwrites_non_finite_output() {
        let mut c = vec![f64::NAN; 8];
        gemm_nn((1, 1, 8), &[2.0], 1, &[1.0; 8], 8, &mut c, 8, 0.0);
        assert_eq!(c, vec![2.0; 8]);
    }
}
