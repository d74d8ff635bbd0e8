//! Row-major matmul kernels.
//!
//! Every output element is accumulated in the same order regardless of how
//! rows are split across threads, so results are bit-identical for any
//! thread count.

use core::sync::atomic::{AtomicUsize, Ordering};

use alloc::vec;

use crate::real::Real;

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);
static DEFAULT_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Below this many multiply-adds a call stays on the calling thread.
#[cfg(feature = "std")]
const PARALLEL_MIN_WORK: usize = 1 << 17;

/// Caps kernel parallelism. `0` restores the default (available cores).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    match MAX_THREADS.load(Ordering::Relaxed) {
        0 => {
            let n = default_threads();
            DEFAULT_THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

#[cfg(feature = "std")]
fn default_threads() -> usize {
    match DEFAULT_THREADS.load(Ordering::Relaxed) {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

#[cfg(not(feature = "std"))]
fn default_threads() -> usize {
    1
}

/// Splits `out` into `rows` chunks of `row_len` and runs `f(first_row, chunk)`
/// on each part, possibly in parallel.
fn for_row_blocks<T: Real, F>(out: &mut [T], rows: usize, row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "std")]
    {
        let threads = if work >= PARALLEL_MIN_WORK {
            max_threads().min(rows)
        } else {
            1
        };
        if threads > 1 {
            let per = rows.div_ceil(threads);
            std::thread::scope(|s| {
                for (i, chunk) in out.chunks_mut(per * row_len).enumerate() {
                    let f = &f;
                    s.spawn(move || f(i * per, chunk));
                }
            });
            return;
        }
    }
    let _ = (rows, row_len, work);
    f(0, out)
}

const MR: usize = 4;
const NR: usize = 16;

/// `out[i, j] += sum_p A(i, p) * b[p, j]` for the `rows` output rows starting at
/// `row0`, where `A(i, p) = a[i * si + p * sp]`. Each element sums over `p` in
/// ascending order.
#[allow(clippy::too_many_arguments)]
fn tiled<T: Real>(
    a: &[T],
    si: usize,
    sp: usize,
    b: &[T],
    out: &mut [T],
    row0: usize,
    kk: usize,
    n: usize,
) {
    let rows = out.len() / n;
    let mut i = 0;
    while i < rows {
        let mr = MR.min(rows - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[T::ZERO; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
                }
                for p in 0..kk {
                    let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(row0 + i + r) * si + p * sp];
                        for c in 0..NR {
                            row[c] += av * brow[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    let orow = &mut out[(i + r) * n + j..(i + r) * n + j + nr];
                    for p in 0..kk {
                        let av = a[(row0 + i + r) * si + p * sp];
                        for (o, &bv) in orow.iter_mut().zip(&b[p * n + j..p * n + j + nr]) {
                            *o += av * bv;
                        }
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    for_row_blocks(out, m, n, m * k * n, |row0, chunk| {
        tiled(a, k, 1, b, chunk, row0, k, n)
    });
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    if m == 0 || k == 0 {
        return;
    }
    let mut bt = vec![T::ZERO; n * k];
    for j in 0..k {
        for p in 0..n {
            bt[p * k + j] = b[j * n + p];
        }
    }
    gemm_nn(a, &bt, out, m, n, k);
}

/// `out[k,n] += a[m,k]ᵀ · c[m,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], c: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if k == 0 || n == 0 {
        return;
    }
    for_row_blocks(out, k, n, m * k * n, |row0, chunk| {
        tiled(a, 1, k, c, chunk, row0, m, n)
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut o = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    o[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        o
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        for (m, k, n) in [(5, 11, 7), (9, 5, 37), (4, 3, 16), (1, 1, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut o = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut o, m, k, n);
            assert_eq!(o, want);

            let bt = transpose(&b, k, n);
            let mut o = vec![0.0; m * n];
            gemm_nt(&a, &bt, &mut o, m, k, n);
            assert_eq!(o, want);

            let at = transpose(&a, m, k);
            let mut o = vec![0.0; m * n];
            gemm_tn(&at, &b, &mut o, k, m, n);
            assert_eq!(o, want);
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let (m, k, n) = (67, 64, 48);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let run = |threads| {
            set_max_threads(threads);
            let mut o = vec![0.0f32; m * n];
            gemm_nn(&a, &b, &mut o, m, k, n);
            o
        };
        let one = run(1);
        let four = run(4);
        set_max_threads(0);
        assert_eq!(one, four);
    }
}
