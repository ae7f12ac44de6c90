//! Thin wrapper over `matrixmultiply` for row-major buffers.

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `trans_a`, `a` is stored as `k × m`; with `trans_b`, `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m <= SMALL_ROWS || m * k * n <= SMALL_WORK {
        small_gemm(m, k, n, a, trans_a, b, trans_b, c, beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
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

// Below these sizes packing overhead dominates the blocked kernel.
const SMALL_ROWS: usize = 4;
const SMALL_WORK: usize = 16 * 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if trans_b {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Row-major `rows × cols` weights for repeated matrix–vector products.
///
/// Entries are kept as `f32` when every one converts exactly, which halves the
/// memory traffic of weight-bound products without changing any value.
#[derive(Clone, Debug)]
pub(crate) struct Rows {
    rows: usize,
    cols: usize,
    store: Store,
}

#[derive(Clone, Debug)]
enum Store {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

impl Rows {
    pub(crate) fn new(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        let exact = data.iter().all(|&v| (v as f32) as f64 == v);
        let store = if exact {
            Store::Single(data.iter().map(|&v| v as f32).collect())
        } else {
            Store::Double(data.to_vec())
        };
        Rows { rows, cols, store }
    }

    /// Packs the transpose of a row-major `cols × rows` buffer.
    pub(crate) fn transposed(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        let mut t = vec![0.0; rows * cols];
        for c in 0..cols {
            for r in 0..rows {
                t[r * cols + c] = data[c * rows + r];
            }
        }
        Rows::new(rows, cols, &t)
    }

    #[cfg(test)]
    fn is_single(&self) -> bool {
        matches!(self.store, Store::Single(_))
    }

    /// `out[r] = bias[r] + row_r · x`.
    pub(crate) fn apply(&self, x: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut out = match bias {
            Some(b) => b.to_vec(),
            None => vec![0.0; self.rows],
        };
        assert_eq!(out.len(), self.rows);
        match &self.store {
            Store::Single(w) => matvec(w, x, &mut out),
            Store::Double(w) => matvec(w, x, &mut out),
        }
        out
    }
}

pub(crate) trait Weight: Copy {
    fn widen(self) -> f64;
}

impl Weight for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Weight for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

/// `out[r] += w[r] · x` over the rows of `w`.
fn matvec<W: Weight + simd::Lanes>(w: &[W], x: &[f64], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if simd::available() {
        // SAFETY: the required CPU features were detected at runtime
        unsafe { simd::matvec(w, x, out) };
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o += scalar_dot(row, x);
    }
}

fn scalar_dot<W: Weight>(a: &[W], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .map(|(x, y)| x.widen() * y)
        .sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k].widen() * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    pub(super) fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    /// Loads eight consecutive weights as two vectors of four `f64`.
    pub(crate) trait Lanes: super::Weight {
        unsafe fn load8(p: *const Self) -> (__m256d, __m256d);
    }

    impl Lanes for f64 {
        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn load8(p: *const f64) -> (__m256d, __m256d) {
            (_mm256_loadu_pd(p), _mm256_loadu_pd(p.add(4)))
        }
    }

    impl Lanes for f32 {
        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn load8(p: *const f32) -> (__m256d, __m256d) {
            let w = _mm256_loadu_ps(p);
            (
                _mm256_cvtps_pd(_mm256_castps256_ps128(w)),
                _mm256_cvtps_pd(_mm256_extractf128_ps(w, 1)),
            )
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn matvec<W: Lanes>(w: &[W], x: &[f64], out: &mut [f64]) {
        let cols = x.len();
        let body = cols / 8 * 8;
        for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
            let (mut s0, mut s1) = (_mm256_setzero_pd(), _mm256_setzero_pd());
            let mut i = 0;
            while i < body {
                let (lo, hi) = W::load8(row.as_ptr().add(i));
                s0 = _mm256_fmadd_pd(lo, _mm256_loadu_pd(x.as_ptr().add(i)), s0);
                s1 = _mm256_fmadd_pd(hi, _mm256_loadu_pd(x.as_ptr().add(i + 4)), s1);
                i += 8;
            }
            let mut lanes = [0.0; 4];
            _mm256_storeu_pd(lanes.as_mut_ptr(), _mm256_add_pd(s0, s1));
            let mut sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
            for k in body..cols {
                sum += row[k].widen() * x[k];
            }
            *o += sum;
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    pub(crate) trait Lanes {}
    impl Lanes for f32 {}
    impl Lanes for f64 {}
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn transposes_agree_with_naive_product() {
        for (m, k, n) in [(3, 4, 5), (1, 32, 128), (40, 30, 50)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i % 7) as f64).collect();
            for ta in [false, true] {
                for tb in [false, true] {
                    let mut c = vec![1.0; m * n];
                    gemm(m, k, n, &a, ta, &b, tb, &mut c, 0.0);
                    assert_eq!(c, naive(m, k, n, &a, ta, &b, tb));
                    let mut acc = vec![1.0; m * n];
                    gemm(m, k, n, &a, ta, &b, tb, &mut acc, 1.0);
                    let expect: Vec<f64> = naive(m, k, n, &a, ta, &b, tb)
                        .iter()
                        .map(|v| v + 1.0)
                        .collect();
                    assert_eq!(acc, expect);
                }
            }
        }
    }

    fn reference(rows: usize, cols: usize, w: &[f64], x: &[f64]) -> Vec<f64> {
        (0..rows)
            .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
            .collect()
    }

    #[test]
    fn packed_rows_match_reference_products() {
        for (rows, cols) in [(5, 3), (7, 8), (9, 37), (64, 128)] {
            let w: Vec<f64> = (0..rows * cols)
                .map(|i| ((i * 37 % 101) as f64 - 50.0) / 64.0)
                .collect();
            let x: Vec<f64> = (0..cols).map(|i| (i as f64 * 0.7).sin()).collect();
            let packed = Rows::new(rows, cols, &w);
            assert!(packed.is_single());
            let bias: Vec<f64> = (0..rows).map(|r| r as f64).collect();
            let got = packed.apply(&x, Some(&bias));
            for ((g, e), b) in got.iter().zip(reference(rows, cols, &w, &x)).zip(&bias) {
                assert!((g - e - b).abs() < 1e-12, "{g} vs {}", e + b);
            }

            let inexact: Vec<f64> = w.iter().map(|v| v + 1e-12).collect();
            let packed = Rows::new(rows, cols, &inexact);
            assert!(!packed.is_single());
            for (g, e) in packed
                .apply(&x, None)
                .iter()
                .zip(reference(rows, cols, &inexact, &x))
            {
                assert!((g - e).abs() < 1e-12);
            }

            let t: Vec<f64> = (0..rows * cols)
                .map(|i| w[(i % rows) * cols + i / rows])
                .collect();
            let packed = Rows::transposed(rows, cols, &t);
            for (g, e) in packed
                .apply(&x, None)
                .iter()
                .zip(reference(rows, cols, &w, &x))
            {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }
}
